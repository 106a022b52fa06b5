//! Context-window constructors.
//!
//! Every constructor is a pure function of its inputs and a seed. The
//! provenance of each window records enough to rebuild it.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, Tokenizer};
use crate::corpus::{
    char_range_to_bytes, AntecedentSpan, ContrastiveExample, Document, DocumentCorpus, GenderLexicon,
    SentencePair, Side,
};
use crate::seed;

/// Attempts per token position before random sampling gives up.
const MAX_ATTEMPTS_PER_TOKEN: usize = 1000;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("sentence index {index} out of range for document {doc_id:?} with {len} sentences")]
    IndexOutOfRange {
        doc_id: String,
        index: usize,
        len: usize,
    },
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("perturbed context needs at least two documents")]
    SingleDocument,
    #[error("no donor other than {exclude:?} has {needed} consecutive sentences")]
    NoDonor { exclude: String, needed: usize },
    #[error("random context requires a tokenizer: {0}")]
    Tokenizer(#[from] ClientError),
    #[error("sampling vocabulary is empty")]
    EmptyVocabulary,
    #[error("random context must be built from a gold window, got {0:?}")]
    NotGold(Condition),
    #[error("no token sequence of length {len} survives re-tokenization")]
    SamplingFailed { len: usize },
    #[error("example {0:?} has no target-side antecedent span")]
    NoTargetSpan(String),
    #[error("example {example_id:?}: antecedent spans {first} and {second} overlap")]
    OverlappingSpans {
        example_id: String,
        first: usize,
        second: usize,
    },
    #[error("example {example_id:?}: antecedent span {span} is out of bounds")]
    SpanOutOfBounds { example_id: String, span: usize },
    #[error("lexicon has {0} gender(s), at least two are needed")]
    TooFewGenders(usize),
    #[error("lexicon has no word of a gender other than {gender:?}")]
    NoReplacement { gender: String },
}

pub type Result<T, E = PerturbError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Gold,
    Perturbed,
    Random,
    AntecedentSwapped,
    None,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Gold => "gold",
            Condition::Perturbed => "perturbed",
            Condition::Random => "random",
            Condition::AntecedentSwapped => "antecedent_swapped",
            Condition::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Condition::Gold,
            Condition::Perturbed,
            Condition::Random,
            Condition::AntecedentSwapped,
            Condition::None,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token ids behind one random pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSlot {
    pub src_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_ids: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    None,
    /// Pairs `start..end` of `source`.
    Gold {
        source: String,
        start: usize,
        end: usize,
    },
    /// A contiguous run `start..start+len` of the donor.
    Perturbed {
        donor: String,
        start: usize,
        len: usize,
        seed: u64,
        sampling: String,
    },
    Random {
        seed: u64,
        slots: Vec<RandomSlot>,
    },
    AntecedentSwapped {
        seed: u64,
        swaps: Vec<SwapRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub condition: Condition,
    pub pairs: Vec<SentencePair>,
    pub provenance: Provenance,
}

impl ContextWindow {
    pub fn none() -> Self {
        Self {
            condition: Condition::None,
            pairs: Vec::new(),
            provenance: Provenance::None,
        }
    }

    pub fn gold(pairs: Vec<SentencePair>, source: &str, start: usize) -> Self {
        let end = start + pairs.len();
        Self {
            condition: Condition::Gold,
            pairs,
            provenance: Provenance::Gold {
                source: source.to_string(),
                start,
                end,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One antecedent replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    /// Position of the original word in the gold context.
    pub span: AntecedentSpan,
    /// Character range of the replacement in the swapped context.
    pub replaced_start: usize,
    pub replaced_end: usize,
    pub original_word: String,
    pub replacement_word: String,
    pub original_gender: String,
    pub replacement_gender: String,
    pub pos_matched: bool,
}

/// The `min(k, index)` pairs before `index`, oldest first.
pub fn gold_context(doc: &Document, index: usize, k: usize) -> Result<ContextWindow> {
    if index >= doc.sentences.len() {
        return Err(PerturbError::IndexOutOfRange {
            doc_id: doc.doc_id.clone(),
            index,
            len: doc.sentences.len(),
        });
    }
    let start = index - k.min(index);
    Ok(ContextWindow::gold(
        doc.sentences[start..index].to_vec(),
        &doc.doc_id,
        start,
    ))
}

/// A pool entry for [`perturbed_from_pool`].
#[derive(Debug, Clone, Copy)]
pub struct Donor<'a> {
    pub id: &'a str,
    pub pairs: &'a [SentencePair],
}

/// `n` consecutive pairs from one donor other than `exclude`, chosen
/// uniformly among donors with at least `n` pairs, starting at a uniform
/// offset.
pub fn perturbed_from_pool(
    pool: &[Donor<'_>],
    exclude: &str,
    n: usize,
    seed: u64,
    label: &str,
) -> Result<ContextWindow> {
    let eligible: Vec<&Donor> = pool
        .iter()
        .filter(|d| d.id != exclude && d.pairs.len() >= n)
        .collect();
    let mut rng = seed::rng(seed, &["perturbed", label, &n.to_string()]);
    let donor = eligible.choose(&mut rng).ok_or_else(|| PerturbError::NoDonor {
        exclude: exclude.to_string(),
        needed: n,
    })?;
    let start = rng.gen_range(0..=donor.pairs.len() - n);
    Ok(ContextWindow {
        condition: Condition::Perturbed,
        pairs: donor.pairs[start..start + n].to_vec(),
        provenance: Provenance::Perturbed {
            donor: donor.id.to_string(),
            start,
            len: n,
            seed,
            sampling: "contiguous".into(),
        },
    })
}

/// Context of the same size as the gold window, drawn from another document.
pub fn perturbed_context(
    corpus: &DocumentCorpus,
    doc_id: &str,
    index: usize,
    k: usize,
    seed: u64,
) -> Result<ContextWindow> {
    let doc = corpus
        .document(doc_id)
        .ok_or_else(|| PerturbError::UnknownDocument(doc_id.to_string()))?;
    if corpus.doc_count() < 2 {
        return Err(PerturbError::SingleDocument);
    }
    let n = gold_context(doc, index, k)?.len();
    let pool: Vec<Donor> = corpus
        .documents()
        .iter()
        .map(|d| Donor {
            id: &d.doc_id,
            pairs: &d.sentences,
        })
        .collect();
    perturbed_from_pool(&pool, doc_id, n, seed, &format!("{doc_id}#{index}"))
}

fn sample_stable(
    len: usize,
    vocab: &[u32],
    tokenizer: &dyn Tokenizer,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, String)> {
    if len == 0 {
        return Ok((Vec::new(), String::new()));
    }
    let mut ids: Vec<u32> = (0..len).map(|_| *vocab.choose(rng).unwrap()).collect();
    for _ in 0..MAX_ATTEMPTS_PER_TOKEN * len {
        let text = tokenizer.decode(&ids)?;
        let again = tokenizer.encode(&text)?;
        if again == ids {
            return Ok((ids, text));
        }
        let bad = ids
            .iter()
            .zip(&again)
            .position(|(a, b)| a != b)
            .unwrap_or(again.len().min(len - 1));
        for id in &mut ids[bad..] {
            *id = *vocab.choose(rng).unwrap();
        }
    }
    Err(PerturbError::SamplingFailed { len })
}

/// Replaces every slot of a gold window by uniformly sampled tokens of the
/// same token length.
///
/// Sequences whose decoded text does not re-tokenize to the same ids are
/// resampled from the first diverging position, so the length equality can
/// be checked on the text alone.
pub fn random_context(
    gold: &ContextWindow,
    vocab: &[u32],
    tokenizer: &dyn Tokenizer,
    seed: u64,
    label: &str,
) -> Result<ContextWindow> {
    if gold.condition != Condition::Gold {
        return Err(PerturbError::NotGold(gold.condition));
    }
    if vocab.is_empty() {
        return Err(PerturbError::EmptyVocabulary);
    }
    let mut rng = seed::rng(seed, &["random", label]);
    let mut pairs = Vec::with_capacity(gold.len());
    let mut slots = Vec::with_capacity(gold.len());
    for pair in &gold.pairs {
        let src_len = tokenizer.encode(&pair.src)?.len();
        let (src_ids, src) = sample_stable(src_len, vocab, tokenizer, &mut rng)?;
        let (tgt_ids, tgt) = match &pair.tgt {
            Some(t) => {
                let tgt_len = tokenizer.encode(t)?.len();
                let (ids, text) = sample_stable(tgt_len, vocab, tokenizer, &mut rng)?;
                (Some(ids), Some(text))
            }
            None => (None, None),
        };
        pairs.push(SentencePair { src, tgt });
        slots.push(RandomSlot { src_ids, tgt_ids });
    }
    Ok(ContextWindow {
        condition: Condition::Random,
        pairs,
        provenance: Provenance::Random { seed, slots },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwapOptions {
    /// Also replace source-side antecedent mentions.
    pub include_source: bool,
}

fn match_case(template: &str, word: &str) -> String {
    let upper = template.chars().next().is_some_and(char::is_uppercase);
    let mut chars = word.chars();
    match chars.next() {
        Some(first) if upper => first.to_uppercase().chain(chars).collect(),
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Replaces the antecedent mentions in an example's context by words of a
/// different gender.
///
/// Replacements come from the lexicon bucket with the antecedent's POS and
/// any other gender. When no such word exists the POS constraint is dropped
/// and the record is marked `pos_matched = false`. Each distinct antecedent
/// word is drawn once, so repeated mentions stay consistent.
pub fn swap_antecedents(
    example: &ContrastiveExample,
    lexicon: &GenderLexicon,
    seed: u64,
    options: SwapOptions,
) -> Result<(ContextWindow, Vec<SwapRecord>)> {
    let genders = lexicon.genders().len();
    if genders < 2 {
        return Err(PerturbError::TooFewGenders(genders));
    }
    let id = &example.example_id;
    let mut order: Vec<usize> = (0..example.antecedent_spans.len())
        .filter(|&i| options.include_source || example.antecedent_spans[i].side == Side::Target)
        .collect();
    if !order
        .iter()
        .any(|&i| example.antecedent_spans[i].side == Side::Target)
    {
        return Err(PerturbError::NoTargetSpan(id.clone()));
    }
    let spans = &example.antecedent_spans;
    order.sort_by_key(|&i| (spans[i].index, spans[i].side, spans[i].start));
    for w in order.windows(2) {
        if spans[w[0]].overlaps(&spans[w[1]]) {
            let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
            return Err(PerturbError::OverlappingSpans {
                example_id: id.clone(),
                first,
                second,
            });
        }
    }

    let mut rng = seed::rng(seed, &["swap", id]);
    let mut drawn: HashMap<String, (String, String, bool)> = HashMap::new();
    let mut pairs = example.context.clone();
    let mut records = Vec::with_capacity(order.len());
    // (side, index) currently being rewritten, with its running char shift.
    let mut cursor: Option<((Side, usize), isize)> = None;

    for &i in &order {
        let span = &spans[i];
        let original = span
            .sentence(&example.context)
            .and_then(|s| span.byte_range(&example.context).map(|r| s[r].to_string()))
            .ok_or_else(|| PerturbError::SpanOutOfBounds {
                example_id: id.clone(),
                span: i,
            })?;

        let key = original.to_lowercase();
        if !drawn.contains_key(&key) {
            let (pos, gender) = lexicon
                .lookup(&original)
                .map(|(p, g)| (p.to_string(), g.to_string()))
                .unwrap_or_else(|| (example.antecedent_pos.clone(), example.antecedent_gender.clone()));
            let mut pos_matched = true;
            let mut candidates = lexicon.other_gender_words(Some(&pos), &gender);
            if candidates.is_empty() {
                pos_matched = false;
                candidates = lexicon.other_gender_words(None, &gender);
            }
            let word = candidates
                .choose(&mut rng)
                .ok_or_else(|| PerturbError::NoReplacement {
                    gender: gender.clone(),
                })?
                .to_string();
            drawn.insert(key.clone(), (word, gender, pos_matched));
        }
        let (word, original_gender, pos_matched) = drawn[&key].clone();
        let replacement_gender = lexicon
            .lookup(&word)
            .map(|(_, g)| g.to_string())
            .unwrap_or_default();
        let replacement = match_case(&original, &word);

        let slot = (span.side, span.index);
        let shift = match cursor {
            Some((s, shift)) if s == slot => shift,
            _ => 0,
        };
        let pair = &mut pairs[span.index];
        let text = match span.side {
            Side::Source => &mut pair.src,
            Side::Target => pair.tgt.as_mut().expect("validated target span"),
        };
        let start = (span.start as isize + shift) as usize;
        let end = (span.end as isize + shift) as usize;
        let bytes = char_range_to_bytes(text, start, end).expect("shifted span in range");
        text.replace_range(bytes, &replacement);
        let new_len = replacement.chars().count();
        cursor = Some((slot, shift + new_len as isize - (span.end - span.start) as isize));

        records.push(SwapRecord {
            span: span.clone(),
            replaced_start: start,
            replaced_end: start + new_len,
            original_word: original,
            replacement_word: replacement,
            original_gender,
            replacement_gender,
            pos_matched,
        });
    }

    let window = ContextWindow {
        condition: Condition::AntecedentSwapped,
        pairs,
        provenance: Provenance::AntecedentSwapped {
            seed,
            swaps: records.clone(),
        },
    };
    Ok((window, records))
}

/// Undoes a swap: puts the original words back.
pub fn restore(swapped: &[SentencePair], records: &[SwapRecord]) -> Vec<SentencePair> {
    let mut pairs = swapped.to_vec();
    for record in records.iter().rev() {
        let pair = &mut pairs[record.span.index];
        let text = match record.span.side {
            Side::Source => &mut pair.src,
            Side::Target => pair.tgt.get_or_insert_with(String::new),
        };
        if let Some(bytes) = char_range_to_bytes(text, record.replaced_start, record.replaced_end) {
            text.replace_range(bytes, &record.original_word);
        }
    }
    pairs
}

#[derive(Serialize)]
struct AuditLine<'a> {
    example_id: &'a str,
    swaps: &'a [SwapRecord],
}

/// Writes one `{"example_id", "swaps"}` line per example.
pub fn write_swap_audit<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a [SwapRecord])>,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (example_id, swaps) in entries {
        serde_json::to_writer(&mut out, &AuditLine { example_id, swaps })?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Share of records that needed the POS fallback.
pub fn fallback_fraction(records: &[SwapRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| !r.pos_matched).count() as f64 / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VocabTokenizer;

    fn doc(id: &str, n: usize) -> Document {
        Document {
            doc_id: id.into(),
            sentences: (0..n)
                .map(|i| SentencePair::new(format!("{id} s{i}"), format!("{id} t{i}")))
                .collect(),
        }
    }

    fn example() -> ContrastiveExample {
        ContrastiveExample {
            example_id: "ex1".into(),
            src: "It was hungry.".into(),
            gold_target: "Sie war hungrig.".into(),
            contrastive_targets: vec!["Er war hungrig.".into()],
            gold_pronoun: "sie".into(),
            contrastive_pronouns: vec!["er".into()],
            context: vec![SentencePair::new(
                "I saw the cat. The cat slept.",
                "Ich sah die Katze. Die Katze schlief.",
            )],
            antecedent_spans: vec![
                AntecedentSpan {
                    side: Side::Target,
                    index: 0,
                    start: 12,
                    end: 17,
                },
                AntecedentSpan {
                    side: Side::Target,
                    index: 0,
                    start: 23,
                    end: 28,
                },
                AntecedentSpan {
                    side: Side::Source,
                    index: 0,
                    start: 10,
                    end: 13,
                },
            ],
            antecedent_pos: "NOUN".into(),
            antecedent_gender: "fem".into(),
        }
    }

    fn lexicon(entries: &[(&str, &str, &str)]) -> GenderLexicon {
        GenderLexicon::from_entries(entries.iter().copied()).unwrap()
    }

    #[test]
    fn gold_windows() {
        let d = doc("a", 10);
        assert!(gold_context(&d, 0, 5).unwrap().is_empty());
        let w = gold_context(&d, 7, 5).unwrap();
        assert_eq!(w.pairs, d.sentences[2..7].to_vec());
        assert_eq!(w.condition, Condition::Gold);
        assert_eq!(gold_context(&d, 3, 5).unwrap().len(), 3);
        assert!(matches!(
            gold_context(&d, 10, 5),
            Err(PerturbError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn perturbed_window_comes_from_another_document() {
        let corpus = DocumentCorpus::new(vec![doc("a", 10), doc("b", 8)]).unwrap();
        let w = perturbed_context(&corpus, "a", 7, 5, 1).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.pairs.iter().all(|p| p.src.starts_with("b ")));
        let Provenance::Perturbed { donor, start, .. } = &w.provenance else {
            panic!("wrong provenance")
        };
        assert_eq!(donor, "b");
        assert_eq!(w.pairs[0].src, format!("b s{start}"));
        assert_eq!(w, perturbed_context(&corpus, "a", 7, 5, 1).unwrap());
    }

    #[test]
    fn perturbed_errors() {
        let single = DocumentCorpus::new(vec![doc("a", 10)]).unwrap();
        assert!(matches!(
            perturbed_context(&single, "a", 7, 5, 1),
            Err(PerturbError::SingleDocument)
        ));
        let short = DocumentCorpus::new(vec![doc("a", 10), doc("b", 2)]).unwrap();
        assert!(matches!(
            perturbed_context(&short, "a", 7, 5, 1),
            Err(PerturbError::NoDonor { needed: 5, .. })
        ));
    }

    #[test]
    fn random_slots_keep_token_lengths() {
        let d = doc("a", 8);
        let texts: Vec<String> = d
            .sentences
            .iter()
            .flat_map(|p| [p.src.clone(), p.tgt_text().to_string()])
            .collect();
        let tok = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 50);
        let gold = gold_context(&d, 6, 5).unwrap();
        let vocab = tok.sampling_vocab();
        let w = random_context(&gold, &vocab, &tok, 9, "a#6").unwrap();
        assert_eq!(w.len(), gold.len());
        for (g, r) in gold.pairs.iter().zip(&w.pairs) {
            assert_eq!(
                tok.encode_text(&g.src).unwrap().len(),
                tok.encode_text(&r.src).unwrap().len()
            );
            assert_eq!(
                tok.encode_text(g.tgt_text()).unwrap().len(),
                tok.encode_text(r.tgt_text()).unwrap().len()
            );
        }
        let Provenance::Random { seed, slots } = &w.provenance else {
            panic!()
        };
        assert_eq!(*seed, 9);
        assert_eq!(tok.decode_ids(&slots[0].src_ids).unwrap(), w.pairs[0].src);
        assert!(
            random_context(&ContextWindow::gold(vec![], "a", 0), &vocab, &tok, 9, "x")
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn single_choice_swap() {
        let lex = lexicon(&[("Katze", "NOUN", "fem"), ("Hund", "NOUN", "masc")]);
        let ex = example();
        let (w, records) = swap_antecedents(&ex, &lex, 3, SwapOptions::default()).unwrap();
        assert_eq!(w.pairs[0].tgt_text(), "Ich sah die Hund. Die Hund schlief.");
        assert_eq!(w.pairs[0].src, ex.context[0].src);
        assert_eq!(records.len(), 2);
        assert!(records
            .iter()
            .all(|r| r.pos_matched && r.replacement_gender == "masc"));
        assert_eq!(restore(&w.pairs, &records), ex.context);
    }

    #[test]
    fn rare_pos_falls_back() {
        let lex = lexicon(&[("Katze", "PROPN", "fem"), ("laufen", "VERB", "neut")]);
        let mut ex = example();
        ex.antecedent_spans.truncate(1);
        let (w, records) = swap_antecedents(&ex, &lex, 3, SwapOptions::default()).unwrap();
        assert!(!records[0].pos_matched);
        assert_eq!(records[0].replacement_word, "Laufen");
        assert_eq!(w.pairs[0].tgt_text(), "Ich sah die Laufen. Die Katze schlief.");
    }

    #[test]
    fn source_side_swap_is_opt_in() {
        let lex = lexicon(&[
            ("cat", "NOUN", "fem"),
            ("dog", "NOUN", "masc"),
            ("Katze", "NOUN", "fem"),
        ]);
        let ex = example();
        let (w, records) = swap_antecedents(&ex, &lex, 3, SwapOptions { include_source: true }).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(w.pairs[0].src, "I saw the dog. The cat slept.");
        assert_eq!(restore(&w.pairs, &records), ex.context);
    }

    #[test]
    fn swap_errors() {
        let one = lexicon(&[("Katze", "NOUN", "fem")]);
        assert!(matches!(
            swap_antecedents(&example(), &one, 1, SwapOptions::default()),
            Err(PerturbError::TooFewGenders(1))
        ));
        let lex = lexicon(&[("Katze", "NOUN", "fem"), ("Hund", "NOUN", "masc")]);
        let mut ex = example();
        ex.antecedent_spans[1].start = 14;
        ex.antecedent_spans[1].end = 20;
        assert!(matches!(
            swap_antecedents(&ex, &lex, 1, SwapOptions::default()),
            Err(PerturbError::OverlappingSpans { .. })
        ));
        let mut ex = example();
        ex.antecedent_spans.retain(|s| s.side == Side::Source);
        assert!(matches!(
            swap_antecedents(&ex, &lex, 1, SwapOptions::default()),
            Err(PerturbError::NoTargetSpan(_))
        ));
    }

    #[test]
    fn condition_names_round_trip() {
        for c in [Condition::Gold, Condition::Random, Condition::AntecedentSwapped] {
            assert_eq!(Condition::parse(c.as_str()), Some(c));
        }
    }
}
