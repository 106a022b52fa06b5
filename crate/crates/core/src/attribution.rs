//! Token attributions and the share of attribution that lands on a span.
//!
//! An [`AttributionVector`] holds one non-negative score per input token and
//! named index sets (`context`, `antecedent`, ...). The attribution
//! percentage of a set `S` is `100 * sum(a[S]) / sum(a)`.
//!
//! Scores come from [`erasure_attribution`], which deletes input tokens and
//! measures the drop in the forced pronoun's probability, or are imported
//! from `ap-v1` JSONL files written by external attribution tools.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{bounded_map, ClientError, ForcedScoring, Tokenizer};
use crate::corpus::{ContrastiveExample, Side};
use crate::prompt::{RenderedPrompt, SegmentRole};

pub const SCHEMA: &str = "ap-v1";

pub const CONTEXT: &str = "context";
pub const ANTECEDENT: &str = "antecedent";
pub const SOURCE_SENTENCE: &str = "source_sentence";
pub const TARGET_PREFIX: &str = "target_prefix";

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: line {line} has schema {found:?}, expected {SCHEMA:?}")]
    Schema {
        path: String,
        line: usize,
        found: String,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("no example with attribution signal ({no_signal} without)")]
    NoSignal { no_signal: usize },
    #[error("backend: {0}")]
    Backend(#[from] ClientError),
    #[error("example {example_id:?}: {message}")]
    Instance { example_id: String, message: String },
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

/// Subset of the input that an attribution percentage is taken over.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    /// The whole input.
    Input,
    Context,
    Antecedent,
    SourceSentence,
    Named(String),
}

impl SpanKind {
    pub fn name(&self) -> &str {
        match self {
            SpanKind::Input => "input",
            SpanKind::Context => CONTEXT,
            SpanKind::Antecedent => ANTECEDENT,
            SpanKind::SourceSentence => SOURCE_SENTENCE,
            SpanKind::Named(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub example_id: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    /// Sorted, duplicate-free token indices per span name.
    pub spans: BTreeMap<String, Vec<usize>>,
    pub method: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl AttributionVector {
    /// Normalizes span sets and checks every invariant.
    pub fn new(
        example_id: impl Into<String>,
        tokens: Vec<String>,
        scores: Vec<f64>,
        spans: BTreeMap<String, Vec<usize>>,
        method: impl Into<String>,
    ) -> Result<Self> {
        let mut v = Self {
            example_id: example_id.into(),
            tokens,
            scores,
            spans,
            method: method.into(),
            meta: Default::default(),
        };
        for set in v.spans.values_mut() {
            set.sort_unstable();
            set.dedup();
        }
        v.validate().map_err(AttributionError::Invalid)?;
        Ok(v)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.scores.len() != self.tokens.len() {
            return Err(format!(
                "{} scores for {} tokens",
                self.scores.len(),
                self.tokens.len()
            ));
        }
        if let Some((i, s)) = self
            .scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || **s < 0.0)
        {
            return Err(format!(
                "score {i} is {s}, scores must be finite and non-negative"
            ));
        }
        for (name, set) in &self.spans {
            if let Some(&i) = set.iter().find(|&&i| i >= self.tokens.len()) {
                return Err(format!(
                    "span {name:?} index {i} out of range for {} tokens",
                    self.tokens.len()
                ));
            }
        }
        if let (Some(ante), Some(ctx)) = (self.spans.get(ANTECEDENT), self.spans.get(CONTEXT)) {
            let ctx: BTreeSet<_> = ctx.iter().collect();
            if let Some(i) = ante.iter().find(|i| !ctx.contains(i)) {
                return Err(format!("antecedent index {i} is outside the context span"));
            }
        } else if self.spans.contains_key(ANTECEDENT) {
            return Err("antecedent span given without a context span".into());
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// Index set for a span kind; unknown names give the empty set.
    pub fn indices(&self, kind: &SpanKind) -> Vec<usize> {
        match kind {
            SpanKind::Input => (0..self.tokens.len()).collect(),
            other => self.spans.get(other.name()).cloned().unwrap_or_default(),
        }
    }

    /// Attribution percentage of `kind`; `None` when every score is zero.
    pub fn ap(&self, kind: &SpanKind) -> Option<f64> {
        attribution_percentage(&self.scores, &self.indices(kind))
    }

    /// An AP value reported by the producer under `meta.ap.<span>`.
    pub fn reported_ap(&self, kind: &SpanKind) -> Option<f64> {
        self.meta.get("ap")?.get(kind.name())?.as_f64()
    }
}

/// `100 * sum(scores[subset]) / sum(scores)`, or `None` without signal.
/// Repeated indices count once.
pub fn attribution_percentage(scores: &[f64], subset: &[usize]) -> Option<f64> {
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let picked: BTreeSet<usize> = subset.iter().copied().collect();
    let part: f64 = picked.iter().map(|&i| scores[i]).sum();
    Some(100.0 * part / total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-example percentages.
    #[default]
    MeanOfAps,
    /// Percentage of the summed span mass over the summed total mass.
    RatioOfSums,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::MeanOfAps => "mean_of_aps",
            Aggregation::RatioOfSums => "ratio_of_sums",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApAggregate {
    pub span_kind: SpanKind,
    pub aggregation: Aggregation,
    pub mean_ap: f64,
    pub n_examples: usize,
    pub no_signal: usize,
    pub per_example: Vec<(String, f64)>,
}

pub fn aggregate_ap(
    vectors: &[AttributionVector],
    kind: &SpanKind,
    aggregation: Aggregation,
) -> Result<ApAggregate> {
    let mut per_example = Vec::new();
    let mut no_signal = 0;
    let (mut span_mass, mut total_mass) = (0.0, 0.0);
    for v in vectors {
        match v.ap(kind) {
            Some(ap) => {
                per_example.push((v.example_id.clone(), ap));
                let idx: BTreeSet<usize> = v.indices(kind).into_iter().collect();
                span_mass += idx.iter().map(|&i| v.scores[i]).sum::<f64>();
                total_mass += v.total();
            }
            None => no_signal += 1,
        }
    }
    if per_example.is_empty() {
        return Err(AttributionError::NoSignal { no_signal });
    }
    let mean_ap = match aggregation {
        Aggregation::MeanOfAps => per_example.iter().map(|(_, a)| a).sum::<f64>() / per_example.len() as f64,
        Aggregation::RatioOfSums => 100.0 * span_mass / total_mass,
    };
    Ok(ApAggregate {
        span_kind: kind.clone(),
        aggregation,
        mean_ap,
        n_examples: per_example.len(),
        no_signal,
        per_example,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    schema: String,
    example_id: String,
    tokens: Vec<String>,
    scores: Vec<f64>,
    spans: BTreeMap<String, Vec<i64>>,
    method: String,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRecord {
    pub line: usize,
    pub example_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imported {
    pub vectors: Vec<AttributionVector>,
    pub rejected: Vec<RejectedRecord>,
}

/// Reads an `ap-v1` file. Records that break an invariant are rejected with
/// a reason; a record of another schema version aborts the import.
pub fn import_attributions(path: &Path) -> Result<Imported> {
    let io = |e: std::io::Error| AttributionError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut vectors = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                rejected.push(RejectedRecord {
                    line: i + 1,
                    example_id: None,
                    reason: format!("invalid JSON: {e}"),
                });
                continue;
            }
        };
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        if schema != SCHEMA {
            return Err(AttributionError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                found: schema.to_string(),
            });
        }
        let example_id = value
            .get("example_id")
            .and_then(|s| s.as_str())
            .map(str::to_string);
        let reject = |reason: String| RejectedRecord {
            line: i + 1,
            example_id: example_id.clone(),
            reason,
        };
        let record: Record = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                rejected.push(reject(e.to_string()));
                continue;
            }
        };
        let mut spans = BTreeMap::new();
        let mut bad = None;
        for (name, set) in record.spans {
            let mut out = Vec::with_capacity(set.len());
            for idx in set {
                match usize::try_from(idx) {
                    Ok(u) => out.push(u),
                    Err(_) => bad = Some(format!("span {name:?} has negative index {idx}")),
                }
            }
            spans.insert(name, out);
        }
        if let Some(reason) = bad {
            rejected.push(reject(reason));
            continue;
        }
        match AttributionVector::new(
            record.example_id,
            record.tokens,
            record.scores,
            spans,
            record.method,
        ) {
            Ok(mut v) => {
                v.meta = record.meta;
                vectors.push(v);
            }
            Err(e) => rejected.push(reject(e.to_string())),
        }
    }
    Ok(Imported { vectors, rejected })
}

/// One `ap-v1` JSONL line, without the trailing newline.
pub fn ap_record_line(v: &AttributionVector) -> String {
    let record = Record {
        schema: SCHEMA.into(),
        example_id: v.example_id.clone(),
        tokens: v.tokens.clone(),
        scores: v.scores.clone(),
        spans: v
            .spans
            .iter()
            .map(|(k, s)| (k.clone(), s.iter().map(|&i| i as i64).collect()))
            .collect(),
        method: v.method.clone(),
        meta: v.meta.clone(),
    };
    serde_json::to_string(&record).expect("record serializes")
}

pub fn write_attributions(path: &Path, vectors: &[AttributionVector]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in vectors {
        out.write_all(ap_record_line(v).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Everything needed to force-decode up to a pronoun and erase input tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureInstance {
    pub example_id: String,
    /// The model input: prompt tokens followed by the forced target prefix.
    pub input_ids: Vec<u32>,
    pub input_tokens: Vec<String>,
    pub pronoun_ids: Vec<u32>,
    pub spans: BTreeMap<String, Vec<usize>>,
    /// Token ranges of the pieces the input was tokenized in; erasure units
    /// at span granularity.
    pub units: Vec<Range<usize>>,
}

/// Character position and length of the pronoun slot in `gold`: the first
/// word where `gold` and `other` differ.
fn pronoun_slot(gold: &str, other: &str, pronoun: &str) -> Option<(usize, usize)> {
    let g: Vec<char> = gold.chars().collect();
    let common = g.iter().zip(other.chars()).take_while(|(a, b)| **a == *b).count();
    if common < g.len() {
        let mut start = common;
        while start > 0 && g[start - 1].is_alphanumeric() {
            start -= 1;
        }
        let mut end = start;
        while end < g.len() && g[end].is_alphanumeric() {
            end += 1;
        }
        if end > start {
            return Some((start, end - start));
        }
    }
    let re = regex::Regex::new(&format!(r"(?i)\b{}\b", regex::escape(pronoun))).ok()?;
    let m = re.find(gold)?;
    Some((gold[..m.start()].chars().count(), m.as_str().chars().count()))
}

impl ErasureInstance {
    /// Tokenizes `prompt` piece by piece (segment and antecedent boundaries
    /// are piece boundaries), then the gold target up to the pronoun, then
    /// the pronoun itself. The pronoun keeps its leading space, if any.
    pub fn build(
        example: &ContrastiveExample,
        prompt: &RenderedPrompt,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self> {
        let fail = |message: String| AttributionError::Instance {
            example_id: example.example_id.clone(),
            message,
        };
        // Byte cut points and the roles of the bytes between them.
        let mut antecedent_bytes: Vec<Range<usize>> = Vec::new();
        for span in &example.antecedent_spans {
            let role = match span.side {
                Side::Source => SegmentRole::ContextSource(span.index),
                Side::Target => SegmentRole::ContextTarget(span.index),
            };
            let Some(segment) = prompt.segment(role) else {
                continue;
            };
            let local = span
                .byte_range(&example.context)
                .ok_or_else(|| fail(format!("antecedent span {span:?} out of bounds")))?;
            antecedent_bytes.push(segment.range.start + local.start..segment.range.start + local.end);
        }
        let mut cuts: BTreeSet<usize> = [0, prompt.text.len()].into();
        for s in &prompt.segments {
            cuts.insert(s.range.start);
            cuts.insert(s.range.end);
        }
        for r in &antecedent_bytes {
            cuts.insert(r.start);
            cuts.insert(r.end);
        }
        let cuts: Vec<usize> = cuts.into_iter().collect();

        let mut ids = Vec::new();
        let mut units = Vec::new();
        let mut spans: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == b {
                continue;
            }
            let piece_ids = tokenizer.encode(&prompt.text[a..b])?;
            let range = ids.len()..ids.len() + piece_ids.len();
            ids.extend(piece_ids);
            if range.is_empty() {
                continue;
            }
            let role = prompt
                .segments
                .iter()
                .find(|s| s.range.start <= a && b <= s.range.end)
                .map(|s| s.role);
            let mut names = Vec::new();
            match role {
                Some(r) if r.is_context() => names.push(CONTEXT),
                Some(SegmentRole::Source) => names.push(SOURCE_SENTENCE),
                _ => {}
            }
            if antecedent_bytes.iter().any(|r| r.start <= a && b <= r.end) {
                names.push(ANTECEDENT);
            }
            for name in names {
                spans.entry(name.to_string()).or_default().extend(range.clone());
            }
            units.push(range);
        }

        let other = example
            .contrastive_targets
            .first()
            .map(String::as_str)
            .unwrap_or("");
        let (start, len) = pronoun_slot(&example.gold_target, other, &example.gold_pronoun)
            .ok_or_else(|| fail("pronoun not found in the gold target".into()))?;
        let continuation = format!("{}{}", prompt.continuation_separator(), example.gold_target);
        let sep_chars = prompt.continuation_separator().chars().count();
        let chars: Vec<char> = continuation.chars().collect();
        let mut cut = sep_chars + start;
        while cut > 0 && chars[cut - 1].is_whitespace() {
            cut -= 1;
        }
        let prefix: String = chars[..cut].iter().collect();
        let pronoun: String = chars[cut..sep_chars + start + len].iter().collect();
        let prefix_ids = tokenizer.encode(&prefix)?;
        if !prefix_ids.is_empty() {
            let range = ids.len()..ids.len() + prefix_ids.len();
            spans
                .entry(TARGET_PREFIX.to_string())
                .or_default()
                .extend(range.clone());
            ids.extend(prefix_ids);
            units.push(range);
        }
        let pronoun_ids = tokenizer.encode(&pronoun)?;
        if pronoun_ids.is_empty() {
            return Err(fail("pronoun tokenizes to nothing".into()));
        }
        let input_tokens = ids
            .iter()
            .map(|&id| tokenizer.decode(&[id]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            example_id: example.example_id.clone(),
            input_ids: ids,
            input_tokens,
            pronoun_ids,
            spans,
            units,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Erase every input token; required for the attribution percentage.
    #[default]
    Full,
    /// Erase context tokens only; all other scores are zero.
    ContextOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Token,
    /// Erase whole tokenization pieces at once; the drop is split evenly
    /// over the piece's tokens.
    Span,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureOptions {
    pub scope: Scope,
    pub granularity: Granularity,
}

/// Attribution by deletion: `a_t = max(0, p(pronoun | X) - p(pronoun | X without t))`.
pub fn erasure_attribution(
    instance: &ErasureInstance,
    backend: &dyn ForcedScoring,
    options: ErasureOptions,
) -> Result<AttributionVector> {
    let n = instance.input_ids.len();
    let context: BTreeSet<usize> = instance
        .spans
        .get(CONTEXT)
        .map(|s| s.iter().copied().collect())
        .unwrap_or_default();
    let units: Vec<Range<usize>> = match options.granularity {
        Granularity::Token => (0..n).map(|i| i..i + 1).collect(),
        Granularity::Span => instance.units.clone(),
    };
    let units: Vec<Range<usize>> = units
        .into_iter()
        .filter(|u| match options.scope {
            Scope::Full => true,
            Scope::ContextOnly => u.clone().all(|i| context.contains(&i)),
        })
        .collect();

    let p_full = backend
        .score_ids(&instance.input_ids, &instance.pronoun_ids)?
        .probability();
    let erased = |unit: &Range<usize>| -> Result<f64, ClientError> {
        let mut ids = Vec::with_capacity(n - unit.len());
        ids.extend_from_slice(&instance.input_ids[..unit.start]);
        ids.extend_from_slice(&instance.input_ids[unit.end..]);
        Ok(backend.score_ids(&ids, &instance.pronoun_ids)?.probability())
    };
    let probs = bounded_map(backend.max_parallel(), &units, erased);

    let mut scores = vec![0.0; n];
    for (unit, p) in units.iter().zip(probs) {
        let delta = (p_full - p?).max(0.0);
        let share = delta / unit.len() as f64;
        for i in unit.clone() {
            scores[i] = share;
        }
    }
    let mut v = AttributionVector::new(
        instance.example_id.clone(),
        instance.input_tokens.clone(),
        scores,
        instance.spans.clone(),
        "erasure",
    )?;
    v.meta.insert("erasure".into(), "deletion".into());
    v.meta.insert("space".into(), "probability".into());
    v.meta.insert(
        "scope".into(),
        serde_json::to_value(options.scope).expect("serializable"),
    );
    v.meta.insert(
        "granularity".into(),
        serde_json::to_value(options.granularity).expect("serializable"),
    );
    v.meta.insert("p_full".into(), p_full.into());
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(scores: &[f64], context: &[usize], antecedent: &[usize]) -> AttributionVector {
        let tokens = (0..scores.len()).map(|i| format!("t{i}")).collect();
        let spans = BTreeMap::from([
            (CONTEXT.to_string(), context.to_vec()),
            (ANTECEDENT.to_string(), antecedent.to_vec()),
        ]);
        AttributionVector::new("x", tokens, scores.to_vec(), spans, "erasure").unwrap()
    }

    #[test]
    fn ap_by_hand() {
        let v = vector(&[1.0, 3.0, 0.0, 4.0, 2.0], &[1, 3], &[3]);
        assert_eq!(v.ap(&SpanKind::Context), Some(70.0));
        assert_eq!(v.ap(&SpanKind::Antecedent), Some(40.0));
        assert_eq!(v.ap(&SpanKind::Input), Some(100.0));
        assert_eq!(attribution_percentage(&v.scores, &[]), Some(0.0));
        assert_eq!(vector(&[0.0, 0.0], &[0], &[]).ap(&SpanKind::Input), None);
    }

    #[test]
    fn aggregates() {
        let a = vector(&[4.0, 6.0], &[0], &[]);
        let b = vector(&[6.0, 4.0], &[0], &[]);
        let z = vector(&[0.0, 0.0], &[0], &[]);
        let agg = aggregate_ap(
            &[a.clone(), b, z.clone()],
            &SpanKind::Context,
            Aggregation::MeanOfAps,
        )
        .unwrap();
        assert_eq!(agg.mean_ap, 50.0);
        assert_eq!((agg.n_examples, agg.no_signal), (2, 1));
        let c = vector(&[1.0, 1.0], &[0], &[]);
        let agg = aggregate_ap(&[a, c], &SpanKind::Context, Aggregation::RatioOfSums).unwrap();
        assert!((agg.mean_ap - 100.0 * 5.0 / 12.0).abs() < 1e-12);
        assert!(matches!(
            aggregate_ap(&[z], &SpanKind::Context, Aggregation::MeanOfAps),
            Err(AttributionError::NoSignal { no_signal: 1 })
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let t = || vec!["a".to_string(), "b".to_string()];
        let spans = |c: Vec<usize>, a: Vec<usize>| {
            BTreeMap::from([(CONTEXT.to_string(), c), (ANTECEDENT.to_string(), a)])
        };
        assert!(AttributionVector::new("x", t(), vec![1.0], spans(vec![], vec![]), "m").is_err());
        assert!(AttributionVector::new("x", t(), vec![1.0, -0.1], spans(vec![], vec![]), "m").is_err());
        assert!(AttributionVector::new("x", t(), vec![1.0, 1.0], spans(vec![2], vec![]), "m").is_err());
        assert!(AttributionVector::new("x", t(), vec![1.0, 1.0], spans(vec![0], vec![1]), "m").is_err());
    }

    #[test]
    fn pronoun_slot_is_the_first_difference() {
        assert_eq!(pronoun_slot("Sie war müde.", "Er war müde.", "sie"), Some((0, 3)));
        assert_eq!(
            pronoun_slot("Ich sah sie dort.", "Ich sah ihn dort.", "sie"),
            Some((8, 3))
        );
        assert_eq!(pronoun_slot("Ich sah es.", "Ich sah es.", "es"), Some((8, 2)));
    }
}
