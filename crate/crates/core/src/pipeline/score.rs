//! `score`: metrics, tables, figure data and the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Serialize;

use super::{
    read_instances, read_jsonl, to_line, Hypothesis, Instance, JudgmentRow, PipelineError, Result, RunConfig,
    CPR_FILE, ERASURE_FILE, GPR_FILE, TRANSLATIONS_FILE,
};
use crate::attribution::{
    aggregate_ap, import_attributions, Aggregation, AttributionError, AttributionVector, SpanKind,
};
use crate::client::ResponseCache;
use crate::metrics::{
    accuracy_raw, bleu, chrf, external_system_score, gpr, load_external_scores, MetricReport,
    PronounJudgment, BLEU_SIGNATURE, CHRF_SIGNATURE, GPR_RULE,
};
use crate::perturb::Condition;
use crate::prompt::PromptKind;
use crate::report::{
    emit_figure_data, emit_table, write_atomic, CellValue, ConditionKey, FigureEntry, Format, Layout,
    ResultsMatrix,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    /// Files written, relative to the run directory.
    pub files: Vec<String>,
    pub translation_cells: usize,
    pub pronoun_cells: usize,
    pub figure_rows: usize,
}

fn data_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn cell(r: &MetricReport) -> CellValue {
    CellValue {
        metric: r.metric.clone(),
        value: r.value,
        n_items: r.n_items,
        signature: Some(r.signature.clone()),
    }
}

fn accuracy_cell(metric: &str, judgments: &[PronounJudgment], rule: &str) -> Result<CellValue> {
    Ok(CellValue {
        metric: metric.into(),
        value: accuracy_raw(judgments).map_err(data_err)?,
        n_items: judgments.len(),
        signature: Some(rule.into()),
    })
}

/// COMET for a cell: `None` if no id has a score, an error if only some do.
fn comet_cell(scores: Option<&HashMap<String, f64>>, ids: &[String]) -> Result<Option<CellValue>> {
    let Some(scores) = scores else {
        return Ok(None);
    };
    let present = ids.iter().filter(|id| scores.contains_key(*id)).count();
    if present == 0 {
        return Ok(None);
    }
    match external_system_score("comet", scores, ids) {
        Some(r) => Ok(Some(cell(&r))),
        None => Err(PipelineError::Data(format!(
            "COMET scores cover {present} of {} instances in a cell",
            ids.len()
        ))),
    }
}

fn load_optional<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if path.is_file() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

#[derive(Serialize)]
struct FigureRecord<'a> {
    model: &'a str,
    method: &'a str,
    span_kind: &'a str,
    aggregation: &'a str,
    mean_ap: f64,
    n_examples: usize,
    no_signal: usize,
}

#[derive(Serialize)]
struct Results<'a> {
    translation: &'a ResultsMatrix,
    pronoun: &'a ResultsMatrix,
    attribution: Vec<FigureRecord<'a>>,
    attribution_without_signal: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    seed: u64,
    config: &'a RunConfig,
    rules: BTreeMap<&'static str, &'static str>,
    cache: BTreeMap<&'static str, serde_json::Value>,
    instances: BTreeMap<&'static str, usize>,
    files: &'a [String],
}

type Groups<'a, T> = BTreeMap<(PromptKind, Condition), Vec<&'a T>>;

pub fn score(config: &RunConfig) -> Result<ScoreSummary> {
    let run_dir = config.run_dir();
    if !run_dir.is_dir() {
        return Err(PipelineError::Data(format!(
            "run directory {} not found; run `prepare` first",
            run_dir.display()
        )));
    }
    let instances = read_instances(&run_dir)?;
    let hyps: HashMap<String, String> = load_optional::<Hypothesis>(&run_dir.join(TRANSLATIONS_FILE))?
        .into_iter()
        .map(|h| (h.instance_id, h.hypothesis))
        .collect();
    let cpr_rows: Vec<JudgmentRow> = load_optional(&run_dir.join(CPR_FILE))?;
    let comet = match &config.score.comet {
        Some(p) => Some(load_external_scores(p).map_err(data_err)?),
        None => None,
    };
    let model = config.backend.model_id.as_str();
    let pair = config.data.language_pair.as_str();

    let mut translation_groups: Groups<_> = BTreeMap::new();
    let mut pronoun_groups: Groups<_> = BTreeMap::new();
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for inst in &instances {
        match inst {
            Instance::Translation(t) => {
                translation_groups
                    .entry((t.prompt_kind, t.condition))
                    .or_default()
                    .push(t);
                *counts.entry("translation").or_default() += 1;
            }
            Instance::Pronoun(p) => {
                pronoun_groups
                    .entry((p.prompt_kind, p.condition))
                    .or_default()
                    .push(p);
                *counts.entry("pronoun").or_default() += 1;
            }
            Instance::Attribution(_) => *counts.entry("attribution").or_default() += 1,
        }
    }

    let mut translation = ResultsMatrix::new();
    for (&(kind, condition), group) in &translation_groups {
        let key = ConditionKey::new(model, pair, kind, condition);
        let have = group.iter().filter(|t| hyps.contains_key(&t.instance_id)).count();
        if have > 0 && have < group.len() {
            return Err(PipelineError::Data(format!(
                "translate is incomplete for {key}: {have} of {} outputs",
                group.len()
            )));
        }
        if have > 0 {
            let h: Vec<String> = group.iter().map(|t| hyps[&t.instance_id].clone()).collect();
            let r: Vec<String> = group.iter().map(|t| t.reference.clone()).collect();
            let insert = |m: &mut ResultsMatrix, c: CellValue| m.insert(key.clone(), c).map_err(data_err);
            insert(&mut translation, cell(&bleu(&h, &r).map_err(data_err)?))?;
            insert(&mut translation, cell(&chrf(&h, &r).map_err(data_err)?))?;
        }
        let ids: Vec<String> = group.iter().map(|t| t.instance_id.clone()).collect();
        if let Some(c) = comet_cell(comet.as_ref(), &ids)? {
            translation.insert(key, c).map_err(data_err)?;
        }
    }

    let mut pronoun = ResultsMatrix::new();
    let mut gpr_lines = String::new();
    let cpr_by_id: HashMap<&str, &JudgmentRow> =
        cpr_rows.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    for (&(kind, condition), group) in &pronoun_groups {
        let key = ConditionKey::new(model, pair, kind, condition);
        let have = group.iter().filter(|p| hyps.contains_key(&p.instance_id)).count();
        if have > 0 && have < group.len() {
            return Err(PipelineError::Data(format!(
                "translate is incomplete for {key}: {have} of {} outputs",
                group.len()
            )));
        }
        if have > 0 {
            let mut judgments = Vec::with_capacity(group.len());
            for p in group {
                let j = gpr(
                    &p.example_id,
                    &hyps[&p.instance_id],
                    &p.gold_pronoun,
                    &p.contrastive_pronouns,
                );
                gpr_lines.push_str(&to_line(&JudgmentRow {
                    instance_id: p.instance_id.clone(),
                    example_id: p.example_id.clone(),
                    prompt_kind: kind,
                    condition,
                    judgment: j.clone(),
                }));
                gpr_lines.push('\n');
                judgments.push(j);
            }
            pronoun
                .insert(key.clone(), accuracy_cell("gpr", &judgments, GPR_RULE)?)
                .map_err(data_err)?;
        }
        let scored: Vec<PronounJudgment> = group
            .iter()
            .filter_map(|p| cpr_by_id.get(p.instance_id.as_str()).map(|r| r.judgment.clone()))
            .collect();
        if !scored.is_empty() && scored.len() < group.len() {
            return Err(PipelineError::Data(format!(
                "contrast is incomplete for {key}: {} of {} judgments",
                scored.len(),
                group.len()
            )));
        }
        if !scored.is_empty() {
            pronoun
                .insert(
                    key.clone(),
                    accuracy_cell("cpr", &scored, "forced-total-logprob")?,
                )
                .map_err(data_err)?;
        }
        let ids: Vec<String> = group.iter().map(|p| p.instance_id.clone()).collect();
        if let Some(c) = comet_cell(comet.as_ref(), &ids)? {
            pronoun.insert(key, c).map_err(data_err)?;
        }
    }

    let mut files: Vec<String> = Vec::new();
    let mut write_tables = |matrix: &ResultsMatrix, layouts: &[Layout]| -> Result<()> {
        for &layout in layouts {
            for format in [Format::Csv, Format::Markdown] {
                let rel = format!("tables/{}.{}", layout.id(), format.extension());
                emit_table(matrix, layout, format, &run_dir.join(&rel)).map_err(data_err)?;
                files.push(rel);
            }
        }
        Ok(())
    };
    if !translation.is_empty() {
        write_tables(&translation, &[Layout::Translation, Layout::Chrf])?;
    }
    if !pronoun.is_empty() {
        write_tables(&pronoun, &[Layout::Pronoun])?;
        if pronoun
            .iter()
            .any(|(k, _)| k.condition == Condition::AntecedentSwapped)
        {
            write_tables(&pronoun, &[Layout::Swap])?;
        }
    }
    if !gpr_lines.is_empty() {
        write_atomic(&run_dir.join(GPR_FILE), gpr_lines.as_bytes())?;
        files.push(GPR_FILE.into());
    }

    let aggregation = config.attribution.aggregation;
    let method_label = |method: &str| match aggregation {
        Aggregation::MeanOfAps => method.to_string(),
        other => format!("{method}:{}", other.as_str()),
    };
    let mut sources: Vec<(String, Vec<AttributionVector>)> = Vec::new();
    let erasure_path = run_dir.join(ERASURE_FILE);
    if erasure_path.is_file() {
        sources.push((method_label("erasure"), import_checked(&erasure_path)?));
    }
    for e in &config.attribution.external {
        sources.push((method_label(&e.method), import_checked(&e.path)?));
    }
    let mut entries = Vec::new();
    let mut without_signal = BTreeMap::new();
    for (method, vectors) in &sources {
        for kind in [SpanKind::Context, SpanKind::Antecedent] {
            match aggregate_ap(vectors, &kind, aggregation) {
                Ok(aggregate) => entries.push(FigureEntry {
                    model: model.to_string(),
                    method: method.clone(),
                    aggregate,
                }),
                Err(AttributionError::NoSignal { no_signal }) => {
                    without_signal.insert(format!("{method}/{}", kind.name()), no_signal);
                }
                Err(e) => return Err(data_err(e)),
            }
        }
    }
    if !entries.is_empty() {
        let rel = "figures/attribution.csv".to_string();
        emit_figure_data(&entries, &run_dir.join(&rel)).map_err(data_err)?;
        files.push(rel);
    }

    if translation.is_empty() && pronoun.is_empty() && entries.is_empty() {
        return Err(PipelineError::Data(format!(
            "nothing to score in {}; run translate, contrast or attribute first",
            run_dir.display()
        )));
    }

    let results = Results {
        translation: &translation,
        pronoun: &pronoun,
        attribution: entries
            .iter()
            .map(|e| FigureRecord {
                model: &e.model,
                method: &e.method,
                span_kind: e.aggregate.span_kind.name(),
                aggregation: e.aggregate.aggregation.as_str(),
                mean_ap: e.aggregate.mean_ap,
                n_examples: e.aggregate.n_examples,
                no_signal: e.aggregate.no_signal,
            })
            .collect(),
        attribution_without_signal: without_signal,
    };
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    write_atomic(&run_dir.join("results.json"), json.as_bytes())?;
    files.push("results.json".into());

    let cache_dir = config
        .backend
        .cache_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join("cache"));
    let entries_in_cache = if cache_dir.is_dir() {
        ResponseCache::open(&cache_dir)?.manifest_entries()
    } else {
        0
    };
    let manifest = Manifest {
        run_id: &config.run_id,
        seed: config.seed,
        config,
        rules: BTreeMap::from([
            ("gpr", GPR_RULE),
            ("cpr", "forced-total-logprob"),
            ("bleu", BLEU_SIGNATURE),
            ("chrf", CHRF_SIGNATURE),
            ("attribution_schema", crate::attribution::SCHEMA),
            ("erasure", "deletion/probability"),
        ]),
        cache: BTreeMap::from([
            ("dir", serde_json::json!(cache_dir)),
            ("entries", serde_json::json!(entries_in_cache)),
        ]),
        instances: counts,
        files: &files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&run_dir.join("run.json"), json.as_bytes())?;
    files.push("run.json".into());

    Ok(ScoreSummary {
        translation_cells: translation.len(),
        pronoun_cells: pronoun.len(),
        figure_rows: entries.len(),
        files,
    })
}

fn import_checked(path: &Path) -> Result<Vec<AttributionVector>> {
    let imported = import_attributions(path).map_err(data_err)?;
    if let Some(r) = imported.rejected.first() {
        return Err(PipelineError::Data(format!(
            "{}: {} invalid record(s); line {}: {}",
            path.display(),
            imported.rejected.len(),
            r.line,
            r.reason
        )));
    }
    Ok(imported.vectors)
}
