//! Translation-quality and pronoun metrics.
//!
//! BLEU and chrF reproduce sacreBLEU 2.4.0 at the signatures below. Pronoun
//! accuracy comes in two flavours: generative ([`gpr`]) inspects the
//! produced translation, contrastive ([`cpr`]) compares forced-decoding
//! scores of the gold translation against its pronoun-swapped variants.

mod sacre;

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};
use thiserror::Error;

use crate::client::ScoredSequence;

pub use sacre::tokenize_13a;

pub const BLEU_SIGNATURE: &str = "nrefs:1|case:mixed|eff:yes|tok:13a|smooth:exp|version:2.4.0";
pub const CHRF_SIGNATURE: &str = "nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no|version:2.4.0";
/// Version tag of the generative matching rule.
pub const GPR_RULE: &str = "gpr-wordcount-v1";

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("no items to score")]
    Empty,
    #[error("example {0:?}: more than one variant labelled gold")]
    DuplicateGold(String),
    #[error("example {0:?}: no variant labelled gold")]
    MissingGold(String),
    #[error("example {0:?}: at least two variants are needed")]
    TooFewVariants(String),
    #[error("{path}:{line}: {message}")]
    ExternalScores {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub signature: String,
    pub n_items: usize,
}

fn check_lengths(hypotheses: &[String], references: &[String]) -> Result<()> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Corpus BLEU against a single reference per segment.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<MetricReport> {
    check_lengths(hypotheses, references)?;
    let mut total = sacre::BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        let s = sacre::bleu_segment(h, r);
        total.sys_len += s.sys_len;
        total.ref_len += s.ref_len;
        for n in 0..4 {
            total.correct[n] += s.correct[n];
            total.total[n] += s.total[n];
        }
    }
    Ok(MetricReport {
        metric: "bleu".into(),
        value: sacre::bleu_from_stats(&total),
        signature: BLEU_SIGNATURE.into(),
        n_items: hypotheses.len(),
    })
}

/// Corpus chrF with character n-grams up to 6 and beta 2.
pub fn chrf(hypotheses: &[String], references: &[String]) -> Result<MetricReport> {
    check_lengths(hypotheses, references)?;
    let mut total: sacre::ChrfStats = Default::default();
    for (h, r) in hypotheses.iter().zip(references) {
        for (acc, seg) in total.iter_mut().zip(sacre::chrf_segment(h, r)) {
            for k in 0..3 {
                acc[k] += seg[k];
            }
        }
    }
    Ok(MetricReport {
        metric: "chrf".into(),
        value: sacre::chrf_from_stats(&total),
        signature: CHRF_SIGNATURE.into(),
        n_items: hypotheses.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgmentDetail {
    /// Occurrences of each pronoun in the generated translation.
    Counts {
        gold: usize,
        contrastive: Vec<(String, usize)>,
    },
    /// Total log-probability of each forced-decoded variant.
    Scores {
        gold: f64,
        contrastive: Vec<(String, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounJudgment {
    pub example_id: String,
    pub correct: bool,
    pub detail: JudgmentDetail,
}

impl PronounJudgment {
    /// Recomputes `correct` from the detail.
    pub fn rederive(&self) -> bool {
        match &self.detail {
            JudgmentDetail::Counts { gold, contrastive } => {
                *gold >= 1 && contrastive.iter().all(|(_, c)| gold > c)
            }
            JudgmentDetail::Scores { gold, contrastive } => contrastive.iter().all(|(_, s)| gold > s),
        }
    }
}

/// Case-insensitive whole-word occurrences of `word` in `text`.
pub fn count_word(text: &str, word: &str) -> usize {
    if word.is_empty() {
        return 0;
    }
    let re = Regex::new(&format!(r"(?i)\b{}\b", regex::escape(word))).expect("escaped pattern");
    re.find_iter(text).count()
}

/// Generative pronoun judgment: the gold pronoun must occur, and more often
/// than every contrastive pronoun.
pub fn gpr(
    example_id: &str,
    hypothesis: &str,
    gold_pronoun: &str,
    contrastive_pronouns: &[String],
) -> PronounJudgment {
    let gold = count_word(hypothesis, gold_pronoun);
    let contrastive: Vec<(String, usize)> = contrastive_pronouns
        .iter()
        .map(|p| (p.clone(), count_word(hypothesis, p)))
        .collect();
    let mut judgment = PronounJudgment {
        example_id: example_id.to_string(),
        correct: false,
        detail: JudgmentDetail::Counts { gold, contrastive },
    };
    judgment.correct = judgment.rederive();
    judgment
}

/// Label that marks the gold variant in [`cpr`] input.
pub const GOLD_LABEL: &str = "gold";

/// Contrastive pronoun judgment over `(label, total log-probability)` pairs.
/// Exactly one label must be [`GOLD_LABEL`]. Ties count as incorrect.
pub fn cpr_totals(example_id: &str, variants: &[(String, f64)]) -> Result<PronounJudgment> {
    if variants.len() < 2 {
        return Err(MetricError::TooFewVariants(example_id.into()));
    }
    let mut gold = None;
    let mut contrastive = Vec::with_capacity(variants.len() - 1);
    for (label, score) in variants {
        if label == GOLD_LABEL {
            if gold.replace(*score).is_some() {
                return Err(MetricError::DuplicateGold(example_id.into()));
            }
        } else {
            contrastive.push((label.clone(), *score));
        }
    }
    let gold = gold.ok_or_else(|| MetricError::MissingGold(example_id.into()))?;
    let mut judgment = PronounJudgment {
        example_id: example_id.to_string(),
        correct: false,
        detail: JudgmentDetail::Scores { gold, contrastive },
    };
    judgment.correct = judgment.rederive();
    Ok(judgment)
}

pub fn cpr(example_id: &str, variants: &[(String, ScoredSequence)]) -> Result<PronounJudgment> {
    let totals: Vec<(String, f64)> = variants
        .iter()
        .map(|(l, s)| (l.clone(), s.total_logprob))
        .collect();
    cpr_totals(example_id, &totals)
}

/// Rounds to one decimal, halves away from zero.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Unrounded percentage of correct judgments.
pub fn accuracy_raw(judgments: &[PronounJudgment]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = judgments.iter().filter(|j| j.correct).count();
    Ok(100.0 * correct as f64 / judgments.len() as f64)
}

/// Percentage of correct judgments, one decimal.
pub fn accuracy(judgments: &[PronounJudgment]) -> Result<f64> {
    accuracy_raw(judgments).map(round1)
}

/// Two-sided exact binomial test of `successes` out of `n` against rate `p`.
///
/// Sums the probabilities of all outcomes no more likely than the observed
/// one, with a small relative tolerance for ties.
pub fn binomial_test(successes: u64, n: u64, p: f64) -> f64 {
    let dist = Binomial::new(p, n).expect("valid binomial parameters");
    let observed = dist.pmf(successes);
    let limit = observed * (1.0 + 1e-7);
    let total: f64 = (0..=n).map(|k| dist.pmf(k)).filter(|&q| q <= limit).sum();
    total.min(1.0)
}

#[derive(Deserialize)]
struct ExternalScore {
    id: String,
    score: f64,
}

/// Reads precomputed segment scores (e.g. COMET) from `{"id", "score"}` lines.
pub fn load_external_scores(path: &Path) -> Result<HashMap<String, f64>> {
    let err = |line: usize, message: String| MetricError::ExternalScores {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| err(0, e.to_string()))?;
    let mut scores = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ExternalScore = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        scores.insert(row.id, row.score);
    }
    Ok(scores)
}

/// System-level external score: mean segment score in `[0, 1]`, times 100.
/// `None` when any id has no score.
pub fn external_system_score(
    metric: &str,
    scores: &HashMap<String, f64>,
    ids: &[String],
) -> Option<MetricReport> {
    if ids.is_empty() {
        return None;
    }
    let values: Option<Vec<f64>> = ids.iter().map(|id| scores.get(id).copied()).collect();
    let values = values?;
    Some(MetricReport {
        metric: metric.to_string(),
        value: 100.0 * values.iter().sum::<f64>() / values.len() as f64,
        signature: "external".into(),
        n_items: ids.len(),
    })
}
