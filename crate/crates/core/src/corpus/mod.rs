//! Document corpora, contrastive pronoun sets and the gender lexicon.
//!
//! All text is NFC-normalized at load time. Antecedent spans are character
//! offsets (not bytes, not backend tokens) into the normalized sentence.

mod contrapro;
mod lexicon;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use contrapro::import_contrapro;
pub use lexicon::{load_lexicon, GenderLexicon};

use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate doc_id {doc_id:?}")]
    DuplicateDocId {
        path: PathBuf,
        line: usize,
        doc_id: String,
    },
    #[error("lexicon {path}: word {word:?} listed under both {first} and {second}")]
    ConflictingWord {
        path: PathBuf,
        word: String,
        first: String,
        second: String,
    },
    #[error("lexicon {0} has no entries")]
    EmptyLexicon(PathBuf),
    #[error("balanced subset of {n} over {classes} classes is not integral")]
    NotDivisible { n: usize, classes: usize },
    #[error("class {class:?} has {available} examples, {needed} needed (short by {})", needed - available)]
    InsufficientClass {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("no examples to subsample")]
    NoExamples,
    #[error("invalid pronoun class set: {0}")]
    InvalidClassSet(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

pub(crate) fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Byte range of the character range `[start, end)` in `text`.
pub fn char_range_to_bytes(text: &str, start: usize, end: usize) -> Option<Range<usize>> {
    if start > end {
        return None;
    }
    let mut boundaries = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let begin = boundaries.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        boundaries.nth(end - start - 1)?
    };
    Some(begin..finish)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<String>,
}

impl SentencePair {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: Some(tgt.into()),
        }
    }

    pub fn source_only(src: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: None,
        }
    }

    pub fn tgt_text(&self) -> &str {
        self.tgt.as_deref().unwrap_or("")
    }

    fn normalized(self) -> Self {
        Self {
            src: nfc(&self.src),
            tgt: self.tgt.map(|t| nfc(&t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<SentencePair>,
}

/// An immutable set of documents, indexed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentCorpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One document per line: `{"doc_id": .., "sentences": [{"src": .., "tgt": ..}]}`.
    #[default]
    Jsonl,
}

impl DocumentCorpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateDocId {
                    path: PathBuf::from("<memory>"),
                    line: i + 1,
                    doc_id: doc.doc_id.clone(),
                });
            }
        }
        Ok(Self { documents, by_id })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn doc_count(&self) -> usize {
        self.documents.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn sentence_counts(&self) -> Vec<(&str, usize)> {
        self.documents
            .iter()
            .map(|d| (d.doc_id.as_str(), d.sentences.len()))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        write_jsonl(path, &self.documents)
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Iterates non-blank lines as `(1-based line number, text)`.
fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut rows = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if !line.trim().is_empty() {
            rows.push((i + 1, line));
        }
    }
    Ok(rows)
}

pub fn load_documents(path: &Path, format: CorpusFormat) -> Result<DocumentCorpus> {
    let CorpusFormat::Jsonl = format;
    let malformed = |line: usize, message: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in jsonl_lines(path)? {
        let doc: Document = serde_json::from_str(&text).map_err(|e| malformed(line, e.to_string()))?;
        if doc.sentences.is_empty() {
            return Err(malformed(
                line,
                format!("document {:?} has no sentences", doc.doc_id),
            ));
        }
        let sentences: Vec<SentencePair> = doc.sentences.into_iter().map(SentencePair::normalized).collect();
        if let Some(i) = sentences.iter().position(|s| s.src.trim().is_empty()) {
            return Err(malformed(line, format!("sentence {i} has an empty source")));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId {
                path: path.to_path_buf(),
                line,
                doc_id: doc.doc_id,
            });
        }
        documents.push(Document {
            doc_id: doc.doc_id,
            sentences,
        });
    }
    DocumentCorpus::new(documents)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Source,
    Target,
}

/// Character range of an antecedent mention inside one context sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AntecedentSpan {
    pub side: Side,
    /// Position in the example's context list (0 = oldest).
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl AntecedentSpan {
    /// The sentence this span points into, if it exists.
    pub fn sentence<'a>(&self, context: &'a [SentencePair]) -> Option<&'a str> {
        let pair = context.get(self.index)?;
        match self.side {
            Side::Source => Some(&pair.src),
            Side::Target => pair.tgt.as_deref(),
        }
    }

    pub fn byte_range(&self, context: &[SentencePair]) -> Option<Range<usize>> {
        if self.start >= self.end {
            return None;
        }
        char_range_to_bytes(self.sentence(context)?, self.start, self.end)
    }

    pub fn overlaps(&self, other: &AntecedentSpan) -> bool {
        self.side == other.side
            && self.index == other.index
            && self.start < other.end
            && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub example_id: String,
    pub src: String,
    pub gold_target: String,
    pub contrastive_targets: Vec<String>,
    pub gold_pronoun: String,
    pub contrastive_pronouns: Vec<String>,
    /// Preceding pairs, most recent last.
    pub context: Vec<SentencePair>,
    pub antecedent_spans: Vec<AntecedentSpan>,
    pub antecedent_pos: String,
    pub antecedent_gender: String,
}

impl ContrastiveExample {
    fn normalized(mut self) -> Self {
        self.src = nfc(&self.src);
        self.gold_target = nfc(&self.gold_target);
        self.contrastive_targets = self.contrastive_targets.iter().map(|t| nfc(t)).collect();
        self.gold_pronoun = nfc(&self.gold_pronoun).to_lowercase();
        self.contrastive_pronouns = self
            .contrastive_pronouns
            .iter()
            .map(|p| nfc(p).to_lowercase())
            .collect();
        self.context = self.context.into_iter().map(SentencePair::normalized).collect();
        self.antecedent_pos = nfc(&self.antecedent_pos);
        self.antecedent_gender = nfc(&self.antecedent_gender);
        self
    }

    /// Checks the example-level invariants; the error is the rejection reason.
    pub fn validate(&self, max_context: usize) -> std::result::Result<(), String> {
        if self.src.trim().is_empty() {
            return Err("empty source sentence".into());
        }
        if self.contrastive_targets.is_empty() {
            return Err("no contrastive targets".into());
        }
        if self.contrastive_targets.len() != self.contrastive_pronouns.len() {
            return Err(format!(
                "{} contrastive targets but {} contrastive pronouns",
                self.contrastive_targets.len(),
                self.contrastive_pronouns.len()
            ));
        }
        if let Some(i) = self
            .contrastive_targets
            .iter()
            .position(|t| t == &self.gold_target)
        {
            return Err(format!("contrastive target {i} equals the gold target"));
        }
        if self.context.len() > max_context {
            return Err(format!(
                "context has {} pairs, maximum is {max_context}",
                self.context.len()
            ));
        }
        for (i, span) in self.antecedent_spans.iter().enumerate() {
            let Some(sentence) = span.sentence(&self.context) else {
                return Err(format!(
                    "antecedent span {i} refers to missing {:?} sentence {}",
                    span.side, span.index
                ));
            };
            let len = sentence.chars().count();
            if span.start >= span.end || span.end > len {
                return Err(format!(
                    "antecedent span {i} [{}, {}) outside sentence of {len} characters",
                    span.start, span.end
                ));
            }
        }
        Ok(())
    }

    /// Number of pronoun classes this example discriminates between.
    pub fn variant_count(&self) -> usize {
        1 + self.contrastive_targets.len()
    }

    /// Keeps the `k` most recent context pairs. Antecedent spans are
    /// reindexed; spans that fall outside the window are dropped.
    pub fn truncate_context(&self, k: usize) -> ContrastiveExample {
        let drop = self.context.len().saturating_sub(k);
        let mut out = self.clone();
        out.context = self.context[drop..].to_vec();
        out.antecedent_spans = self
            .antecedent_spans
            .iter()
            .filter(|s| s.index >= drop)
            .map(|s| AntecedentSpan {
                index: s.index - drop,
                ..s.clone()
            })
            .collect();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub example_id: String,
    pub reason: String,
}

/// Result of loading a contrastive set: accepted examples plus rejections.
#[derive(Debug, Clone, Default)]
pub struct ContrastiveSet {
    pub examples: Vec<ContrastiveExample>,
    pub rejected: Vec<Rejection>,
}

impl ContrastiveSet {
    pub fn input_count(&self) -> usize {
        self.examples.len() + self.rejected.len()
    }

    pub(crate) fn from_candidates(
        candidates: impl IntoIterator<Item = ContrastiveExample>,
        max_context: usize,
    ) -> Self {
        let mut set = ContrastiveSet::default();
        let mut ids = HashSet::new();
        for example in candidates {
            let verdict = if ids.insert(example.example_id.clone()) {
                example.validate(max_context)
            } else {
                Err("duplicate example_id".to_string())
            };
            match verdict {
                Ok(()) => set.examples.push(example),
                Err(reason) => set.rejected.push(Rejection {
                    example_id: example.example_id,
                    reason,
                }),
            }
        }
        set
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContrastiveFormat {
    /// One [`ContrastiveExample`] per line.
    #[default]
    Jsonl,
    /// The public ContraPro json plus the context files produced by its
    /// conversion scripts (`context_size` lines per example).
    Contrapro {
        context_src: PathBuf,
        context_tgt: PathBuf,
        context_size: usize,
    },
}

pub fn load_contrastive_set(
    path: &Path,
    format: &ContrastiveFormat,
    max_context: usize,
) -> Result<ContrastiveSet> {
    match format {
        ContrastiveFormat::Jsonl => {
            let mut candidates = Vec::new();
            for (line, text) in jsonl_lines(path)? {
                let example: ContrastiveExample =
                    serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                        path: path.to_path_buf(),
                        line,
                        message: e.to_string(),
                    })?;
                candidates.push(example.normalized());
            }
            Ok(ContrastiveSet::from_candidates(candidates, max_context))
        }
        ContrastiveFormat::Contrapro {
            context_src,
            context_tgt,
            context_size,
        } => {
            let candidates = import_contrapro(path, context_src, context_tgt, *context_size)?
                .into_iter()
                .map(ContrastiveExample::normalized);
            Ok(ContrastiveSet::from_candidates(candidates, max_context))
        }
    }
}

pub fn write_contrastive_set(path: &Path, examples: &[ContrastiveExample]) -> std::io::Result<()> {
    write_jsonl(path, examples)
}

/// Ordered pronoun classes for one language pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounClassSet {
    language_pair: String,
    classes: Vec<String>,
}

impl PronounClassSet {
    pub fn new(language_pair: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        let classes: Vec<String> = classes.iter().map(|c| nfc(c.trim()).to_lowercase()).collect();
        if classes.len() < 2 {
            return Err(CorpusError::InvalidClassSet(format!(
                "need at least two classes, got {}",
                classes.len()
            )));
        }
        let distinct: HashSet<&String> = classes.iter().collect();
        if distinct.len() != classes.len() {
            return Err(CorpusError::InvalidClassSet("classes are not distinct".into()));
        }
        Ok(Self {
            language_pair: language_pair.into(),
            classes,
        })
    }

    pub fn en_de() -> Self {
        Self::new("en-de", vec!["er".into(), "sie".into(), "es".into()]).unwrap()
    }

    pub fn en_fr() -> Self {
        Self::new("en-fr", vec!["il".into(), "elle".into()]).unwrap()
    }

    pub fn language_pair(&self) -> &str {
        &self.language_pair
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn chance_accuracy(&self) -> f64 {
        100.0 / self.classes.len() as f64
    }
}

/// Draws `n / classes` examples from every gold-pronoun class.
///
/// Classes are the distinct gold pronouns present in `examples`. The output
/// order is a seeded shuffle, so identical inputs give identical lists.
pub fn sample_balanced_subset(
    examples: &[ContrastiveExample],
    n: usize,
    seed: u64,
) -> Result<Vec<ContrastiveExample>> {
    if examples.is_empty() {
        return Err(CorpusError::NoExamples);
    }
    let mut by_class: BTreeMap<&str, Vec<&ContrastiveExample>> = BTreeMap::new();
    for example in examples {
        by_class
            .entry(example.gold_pronoun.as_str())
            .or_default()
            .push(example);
    }
    let classes = by_class.len();
    if !n.is_multiple_of(classes) {
        return Err(CorpusError::NotDivisible { n, classes });
    }
    let per_class = n / classes;
    for (class, members) in &by_class {
        if members.len() < per_class {
            return Err(CorpusError::InsufficientClass {
                class: class.to_string(),
                needed: per_class,
                available: members.len(),
            });
        }
    }
    let mut subset = Vec::with_capacity(n);
    for (class, mut members) in by_class {
        let mut rng = seed::rng(seed, &["balanced", class]);
        members.shuffle(&mut rng);
        subset.extend(members.into_iter().take(per_class).cloned());
    }
    subset.shuffle(&mut seed::rng(seed, &["balanced-order"]));
    Ok(subset)
}
