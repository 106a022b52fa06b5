//! Result tables and figure data.
//!
//! A [`ResultsMatrix`] maps (model, language pair, prompt kind, context
//! condition) to metric values. Tables render it in a fixed column order;
//! missing cells print as `--`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::ApAggregate;
use crate::metrics::round1;
use crate::perturb::Condition;
use crate::prompt::PromptKind;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown table layout {0:?}")]
    UnknownLayout(String),
    #[error("unknown table format {0:?}")]
    UnknownFormat(String),
    #[error("results matrix is empty")]
    EmptyMatrix,
    #[error("duplicate {metric} value for {key}")]
    DuplicateCell { key: String, metric: String },
    #[error("prompt kind {kind} cannot pair with condition {condition}")]
    InvalidKey { kind: String, condition: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionKey {
    pub model_id: String,
    pub language_pair: String,
    pub prompt_kind: PromptKind,
    pub condition: Condition,
}

impl ConditionKey {
    pub fn new(model_id: &str, language_pair: &str, prompt_kind: PromptKind, condition: Condition) -> Self {
        Self {
            model_id: model_id.to_string(),
            language_pair: language_pair.to_string(),
            prompt_kind,
            condition,
        }
    }
}

impl std::fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.model_id,
            self.language_pair,
            self.prompt_kind.as_str(),
            self.condition
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    #[serde(with = "cells_as_list")]
    cells: BTreeMap<ConditionKey, Vec<CellValue>>,
}

mod cells_as_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: ConditionKey,
        values: Vec<CellValue>,
    }

    pub fn serialize<S: Serializer>(
        cells: &BTreeMap<ConditionKey, Vec<CellValue>>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(cells.iter().map(|(k, v)| Entry {
            key: k.clone(),
            values: v.clone(),
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<ConditionKey, Vec<CellValue>>, D::Error> {
        let entries: Vec<Entry> = Vec::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.key, e.values)).collect())
    }
}

impl ResultsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn insert(&mut self, key: ConditionKey, value: CellValue) -> Result<()> {
        if (key.prompt_kind == PromptKind::Sentence) != (key.condition == Condition::None) {
            return Err(ReportError::InvalidKey {
                kind: key.prompt_kind.as_str().into(),
                condition: key.condition.as_str().into(),
            });
        }
        let values = self.cells.entry(key.clone()).or_default();
        if values.iter().any(|v| v.metric == value.metric) {
            return Err(ReportError::DuplicateCell {
                key: key.to_string(),
                metric: value.metric,
            });
        }
        values.push(value);
        Ok(())
    }

    pub fn get(&self, key: &ConditionKey, metric: &str) -> Option<&CellValue> {
        self.cells.get(key)?.iter().find(|v| v.metric == metric)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ConditionKey, &[CellValue])> {
        self.cells.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Distinct (model, language pair) rows in sorted order.
    pub fn rows(&self) -> Vec<(&str, &str)> {
        let mut rows: Vec<(&str, &str)> = self
            .cells
            .keys()
            .map(|k| (k.model_id.as_str(), k.language_pair.as_str()))
            .collect();
        rows.dedup();
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Sentence baseline, then generic and explicit prompts under random,
    /// perturbed and gold context; COMET and BLEU.
    Translation,
    /// Same columns as `Translation`, chrF only.
    Chrf,
    /// Sentence baseline and generic prompt under random, perturbed and gold
    /// context; COMET, GPR and CPR.
    Pronoun,
    /// Generic prompt with gold and antecedent-swapped context; GPR and CPR.
    Swap,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Translation, Layout::Chrf, Layout::Pronoun, Layout::Swap];

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.id() == id)
            .ok_or_else(|| ReportError::UnknownLayout(id.to_string()))
    }

    pub fn id(self) -> &'static str {
        match self {
            Layout::Translation => "translation",
            Layout::Chrf => "chrf",
            Layout::Pronoun => "pronoun",
            Layout::Swap => "swap",
        }
    }

    pub fn groups(self) -> Vec<(PromptKind, Condition)> {
        use Condition::*;
        use PromptKind::*;
        let contexts = [Random, Perturbed, Gold];
        match self {
            Layout::Translation | Layout::Chrf => std::iter::once((Sentence, None))
                .chain(contexts.iter().map(|&c| (Generic, c)))
                .chain(contexts.iter().map(|&c| (Explicit, c)))
                .collect(),
            Layout::Pronoun => std::iter::once((Sentence, None))
                .chain(contexts.iter().map(|&c| (Generic, c)))
                .collect(),
            Layout::Swap => vec![(Generic, Gold), (Generic, AntecedentSwapped)],
        }
    }

    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            Layout::Translation => &["comet", "bleu"],
            Layout::Chrf => &["chrf"],
            Layout::Pronoun => &["comet", "gpr", "cpr"],
            Layout::Swap => &["gpr", "cpr"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

pub const MISSING: &str = "--";

fn group_label(kind: PromptKind, condition: Condition) -> String {
    match condition {
        Condition::None => kind.as_str().to_string(),
        c => format!("{}_{}", kind.as_str(), c.as_str()),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_table(matrix: &ResultsMatrix, layout: Layout, format: Format) -> Result<String> {
    if matrix.is_empty() {
        return Err(ReportError::EmptyMatrix);
    }
    let groups = layout.groups();
    let metrics = layout.metrics();
    let mut out = String::new();
    match format {
        Format::Csv => {
            let mut header = vec!["model".to_string(), "language_pair".to_string()];
            for &(kind, cond) in &groups {
                for m in metrics {
                    let name = format!("{}_{m}", group_label(kind, cond));
                    header.push(format!("{name}_raw"));
                    header.insert(header.len() - 1, name);
                }
            }
            writeln!(out, "{}", header.join(",")).unwrap();
        }
        Format::Markdown => {
            let mut header = vec!["model".to_string(), "pair".to_string()];
            let mut rule = vec!["---".to_string(), "---".to_string()];
            for &(kind, cond) in &groups {
                for m in metrics {
                    header.push(format!(
                        "{} {}",
                        group_label(kind, cond).replace('_', " "),
                        m.to_uppercase()
                    ));
                    rule.push("---:".into());
                }
            }
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            writeln!(out, "|{}|", rule.join("|")).unwrap();
        }
    }
    for (model, pair) in matrix.rows() {
        let mut fields = vec![model.to_string(), pair.to_string()];
        for &(kind, cond) in &groups {
            let key = ConditionKey::new(model, pair, kind, cond);
            for m in metrics {
                let cell = matrix.get(&key, m);
                let shown = cell.map_or(MISSING.to_string(), |c| format!("{:.1}", round1(c.value)));
                fields.push(shown);
                if format == Format::Csv {
                    fields.push(cell.map_or(MISSING.to_string(), |c| format!("{}", c.value)));
                }
            }
        }
        match format {
            Format::Csv => {
                let line: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
                writeln!(out, "{}", line.join(",")).unwrap();
            }
            Format::Markdown => writeln!(out, "| {} |", fields.join(" | ")).unwrap(),
        }
    }
    Ok(out)
}

pub fn emit_table(matrix: &ResultsMatrix, layout: Layout, format: Format, path: &Path) -> Result<()> {
    let text = render_table(matrix, layout, format)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// One aggregate labelled with the model and attribution method it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureEntry {
    pub model: String,
    pub method: String,
    pub aggregate: ApAggregate,
}

pub const FIGURE_HEADER: &str = "model,method,span_kind,mean_ap,n";

/// Long-format CSV, one row per aggregate, in input order.
pub fn render_figure_data(entries: &[FigureEntry]) -> String {
    let mut out = format!("{FIGURE_HEADER}\n");
    for e in entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&e.model),
            csv_field(&e.method),
            csv_field(e.aggregate.span_kind.name()),
            e.aggregate.mean_ap,
            e.aggregate.n_examples
        )
        .unwrap();
    }
    out
}

pub fn emit_figure_data(entries: &[FigureEntry], path: &Path) -> Result<()> {
    write_atomic(path, render_figure_data(entries).as_bytes())?;
    Ok(())
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{Aggregation, SpanKind};

    fn cell(metric: &str, value: f64) -> CellValue {
        CellValue {
            metric: metric.into(),
            value,
            n_items: 10,
            signature: None,
        }
    }

    fn full_matrix() -> ResultsMatrix {
        let mut m = ResultsMatrix::new();
        for (i, (kind, cond)) in Layout::Translation.groups().into_iter().enumerate() {
            let key = ConditionKey::new("m", "en-de", kind, cond);
            m.insert(key.clone(), cell("bleu", 20.0 + i as f64 + 0.25))
                .unwrap();
            m.insert(key, cell("comet", 80.0 + i as f64 + 0.05)).unwrap();
        }
        m
    }

    #[test]
    fn one_row_seven_groups() {
        let csv = render_table(&full_matrix(), Layout::Translation, Format::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 2 + 7 * 2 * 2);
        assert!(lines[0].starts_with("model,language_pair,sentence_comet,sentence_comet_raw,sentence_bleu"));
        assert!(!csv.contains(MISSING));
    }

    #[test]
    fn missing_cells_render_placeholders() {
        let mut m = ResultsMatrix::new();
        m.insert(
            ConditionKey::new("m", "en-de", PromptKind::Generic, Condition::Gold),
            cell("bleu", 30.0),
        )
        .unwrap();
        let md = render_table(&m, Layout::Translation, Format::Markdown).unwrap();
        let row = md.lines().nth(2).unwrap();
        assert_eq!(row.matches(MISSING).count(), 13);
        assert!(row.contains("30.0"));
    }

    #[test]
    fn formats_agree() {
        let m = full_matrix();
        let csv = render_table(&m, Layout::Translation, Format::Csv).unwrap();
        let md = render_table(&m, Layout::Translation, Format::Markdown).unwrap();
        let csv_values: Vec<&str> = csv
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .skip(2)
            .step_by(2)
            .collect();
        let md_values: Vec<&str> = md
            .lines()
            .nth(2)
            .unwrap()
            .trim_matches('|')
            .split('|')
            .map(str::trim)
            .skip(2)
            .collect();
        assert_eq!(csv_values, md_values);
        assert_eq!(csv_values[1], "20.3");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            Layout::parse("table9"),
            Err(ReportError::UnknownLayout(_))
        ));
        assert!(matches!(
            render_table(&ResultsMatrix::new(), Layout::Chrf, Format::Csv),
            Err(ReportError::EmptyMatrix)
        ));
        let mut m = full_matrix();
        let dup = m.insert(
            ConditionKey::new("m", "en-de", PromptKind::Sentence, Condition::None),
            cell("bleu", 1.0),
        );
        assert!(matches!(dup, Err(ReportError::DuplicateCell { .. })));
        let bad = m.insert(
            ConditionKey::new("m", "en-de", PromptKind::Sentence, Condition::Gold),
            cell("bleu", 1.0),
        );
        assert!(matches!(bad, Err(ReportError::InvalidKey { .. })));
    }

    #[test]
    fn figure_rows_round_trip() {
        let mut entries = Vec::new();
        for model in ["a", "b"] {
            for kind in [SpanKind::Context, SpanKind::Antecedent] {
                entries.push(FigureEntry {
                    model: model.into(),
                    method: "erasure".into(),
                    aggregate: ApAggregate {
                        span_kind: kind,
                        aggregation: Aggregation::MeanOfAps,
                        mean_ap: 1.0 / 3.0 * 100.0,
                        n_examples: 7,
                        no_signal: 0,
                        per_example: vec![],
                    },
                });
            }
        }
        let csv = render_figure_data(&entries);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for (row, e) in rows.iter().zip(&entries) {
            let v: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
            assert_eq!(v, e.aggregate.mean_ap);
        }
    }

    #[test]
    fn matrix_json_round_trip() {
        let m = full_matrix();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ResultsMatrix>(&json).unwrap(), m);
    }
}
