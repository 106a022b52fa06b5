//! Importer for the public ContraPro release.
//!
//! The release ships a json array of annotated examples; context sentences
//! are extracted separately by its conversion scripts into parallel text
//! files holding `context_size` lines per example (oldest first).

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{AntecedentSpan, ContrastiveExample, CorpusError, Result, SentencePair, Side};

#[derive(Debug, Deserialize)]
struct Entry {
    #[serde(rename = "document id", default)]
    document_id: Option<String>,
    #[serde(rename = "segment id", default)]
    segment_id: Option<serde_json::Value>,
    #[serde(rename = "src segment")]
    src_segment: String,
    #[serde(rename = "ref segment")]
    ref_segment: String,
    #[serde(rename = "ref pronoun")]
    ref_pronoun: String,
    errors: Vec<ErrorVariant>,
    #[serde(rename = "ante distance", default)]
    ante_distance: Option<usize>,
    #[serde(rename = "ref ante head", default)]
    ref_ante_head: Option<String>,
    #[serde(rename = "ref ante head pos", default)]
    ref_ante_head_pos: Option<String>,
    #[serde(rename = "ref ante head gender", default)]
    ref_ante_head_gender: Option<String>,
    #[serde(rename = "src ante head", default)]
    src_ante_head: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ErrorVariant {
    contrastive: String,
    replacement: String,
}

/// Character offsets of the first whole-word occurrence of `word`.
pub(crate) fn find_word(sentence: &str, word: &str) -> Option<(usize, usize)> {
    if word.is_empty() {
        return None;
    }
    let chars: Vec<char> = sentence.chars().collect();
    let needle: Vec<char> = word.chars().collect();
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    (0..=chars.len().checked_sub(needle.len())?).find_map(|start| {
        let end = start + needle.len();
        let hit = chars[start..end] == needle[..]
            && (start == 0 || !is_word(chars[start - 1]))
            && (end == chars.len() || !is_word(chars[end]));
        hit.then_some((start, end))
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    fs::read_to_string(path)
        .map(|text| text.lines().map(str::to_string).collect())
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn import_contrapro(
    json_path: &Path,
    context_src: &Path,
    context_tgt: &Path,
    context_size: usize,
) -> Result<Vec<ContrastiveExample>> {
    let text = fs::read_to_string(json_path).map_err(|source| CorpusError::Io {
        path: json_path.to_path_buf(),
        source,
    })?;
    let entries: Vec<Entry> = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
        path: json_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let src_lines = read_lines(context_src)?;
    let tgt_lines = read_lines(context_tgt)?;
    let expected = entries.len() * context_size;
    for (path, lines) in [(context_src, &src_lines), (context_tgt, &tgt_lines)] {
        if lines.len() != expected {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: lines.len(),
                message: format!(
                    "expected {expected} context lines ({} examples x {context_size})",
                    entries.len()
                ),
            });
        }
    }

    let mut examples = Vec::with_capacity(entries.len());
    for (i, entry) in entries.into_iter().enumerate() {
        let block = i * context_size..(i + 1) * context_size;
        let context: Vec<SentencePair> = src_lines[block.clone()]
            .iter()
            .zip(&tgt_lines[block])
            .map(|(s, t)| SentencePair::new(s.clone(), t.clone()))
            .collect();

        let mut spans = Vec::new();
        // distance 1 is the sentence right before the current one
        if let Some(distance) = entry.ante_distance.filter(|d| (1..=context_size).contains(d)) {
            let index = context_size - distance;
            let heads = [
                (
                    Side::Target,
                    entry.ref_ante_head.as_deref(),
                    context[index].tgt_text(),
                ),
                (
                    Side::Source,
                    entry.src_ante_head.as_deref(),
                    context[index].src.as_str(),
                ),
            ];
            for (side, head, sentence) in heads {
                if let Some((start, end)) = head.and_then(|h| find_word(sentence, h)) {
                    spans.push(AntecedentSpan {
                        side,
                        index,
                        start,
                        end,
                    });
                }
            }
        }

        let example_id = match (&entry.document_id, &entry.segment_id) {
            (Some(doc), Some(seg)) => format!("{doc}:{}", seg.to_string().trim_matches('"')),
            _ => format!("contrapro-{i}"),
        };
        examples.push(ContrastiveExample {
            example_id,
            src: entry.src_segment,
            gold_target: entry.ref_segment,
            contrastive_targets: entry.errors.iter().map(|e| e.contrastive.clone()).collect(),
            gold_pronoun: entry.ref_pronoun,
            contrastive_pronouns: entry.errors.into_iter().map(|e| e.replacement).collect(),
            context,
            antecedent_spans: spans,
            antecedent_pos: entry.ref_ante_head_pos.unwrap_or_default(),
            antecedent_gender: entry.ref_ante_head_gender.unwrap_or_default(),
        });
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_whole_words_only() {
        assert_eq!(find_word("Die Katzen und die Katze", "Katze"), Some((19, 24)));
        assert_eq!(find_word("Größe", "Größe"), Some((0, 5)));
        assert_eq!(find_word("abc", "abcd"), None);
    }

    #[test]
    fn imports_release_layout() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"[{"document id": "doc1", "segment id": 4,
            "src segment": "It is broken.", "ref segment": "Sie ist kaputt.",
            "ref pronoun": "Sie", "ante distance": 1,
            "ref ante head": "Tür", "ref ante head pos": "NN", "ref ante head gender": "Fem",
            "src ante head": "door",
            "errors": [{"contrastive": "Er ist kaputt.", "replacement": "Er"},
                       {"contrastive": "Es ist kaputt.", "replacement": "Es"}]}]"#;
        let p = dir.path();
        fs::write(p.join("c.json"), json).unwrap();
        fs::write(p.join("ctx.en"), "Hello.\nOpen the door.\n").unwrap();
        fs::write(p.join("ctx.de"), "Hallo.\nÖffne die Tür.\n").unwrap();
        let examples = import_contrapro(&p.join("c.json"), &p.join("ctx.en"), &p.join("ctx.de"), 2).unwrap();
        let e = &examples[0];
        assert_eq!(e.example_id, "doc1:4");
        assert_eq!(e.contrastive_targets.len(), 2);
        assert_eq!(e.context.len(), 2);
        assert_eq!(e.antecedent_spans.len(), 2);
        let tgt = &e.antecedent_spans[0];
        assert_eq!(
            (tgt.side, tgt.index, tgt.start, tgt.end),
            (Side::Target, 1, 10, 13)
        );
        let e = e.clone().normalized();
        assert_eq!(e.gold_pronoun, "sie");
        assert!(e.validate(5).is_ok());
    }

    #[test]
    fn context_line_count_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(
            p.join("c.json"),
            r#"[{"src segment":"a","ref segment":"b","ref pronoun":"er","errors":[]}]"#,
        )
        .unwrap();
        fs::write(p.join("s"), "one\n").unwrap();
        fs::write(p.join("t"), "one\n").unwrap();
        assert!(import_contrapro(&p.join("c.json"), &p.join("s"), &p.join("t"), 2).is_err());
    }
}
