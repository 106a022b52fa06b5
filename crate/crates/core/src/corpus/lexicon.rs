use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use super::{nfc, open, CorpusError, Result};

/// Antecedent word forms grouped by `(POS tag, gender)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenderLexicon {
    buckets: BTreeMap<(String, String), Vec<String>>,
    index: HashMap<String, (String, String)>,
}

impl GenderLexicon {
    /// Builds a lexicon from `(word, pos, gender)` triples.
    ///
    /// Repeating a word under the same key is ignored; listing it under a
    /// second key is an error carrying the word and both keys.
    pub fn from_entries<I, S>(entries: I) -> std::result::Result<Self, (String, String, String)>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut lexicon = GenderLexicon::default();
        for (word, pos, gender) in entries {
            let word = nfc(word.as_ref());
            let key = (nfc(pos.as_ref()), nfc(gender.as_ref()));
            match lexicon.index.get(&word) {
                Some(existing) if *existing == key => continue,
                Some(existing) => {
                    return Err((
                        word,
                        format!("{}/{}", existing.0, existing.1),
                        format!("{}/{}", key.0, key.1),
                    ))
                }
                None => {}
            }
            lexicon.index.insert(word.clone(), key.clone());
            lexicon.buckets.entry(key).or_default().push(word);
        }
        Ok(lexicon)
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn genders(&self) -> BTreeSet<&str> {
        self.buckets.keys().map(|(_, g)| g.as_str()).collect()
    }

    pub fn words(&self, pos: &str, gender: &str) -> &[String] {
        self.buckets
            .get(&(pos.to_string(), gender.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn lookup(&self, word: &str) -> Option<(&str, &str)> {
        self.index
            .get(word)
            .map(|(pos, gender)| (pos.as_str(), gender.as_str()))
    }

    /// Size of every `(pos, gender)` bucket, in key order.
    pub fn bucket_sizes(&self) -> Vec<((&str, &str), usize)> {
        self.buckets
            .iter()
            .map(|((p, g), words)| ((p.as_str(), g.as_str()), words.len()))
            .collect()
    }

    /// Words with the given POS whose gender differs from `gender`, in a
    /// stable order.
    pub fn other_gender_words(&self, pos: Option<&str>, gender: &str) -> Vec<&str> {
        self.buckets
            .iter()
            .filter(|((p, g), _)| g != gender && pos.is_none_or(|pos| p == pos))
            .flat_map(|(_, words)| words.iter().map(String::as_str))
            .collect()
    }
}

/// Reads a `word <TAB> pos <TAB> gender` file. `#` starts a comment line.
pub fn load_lexicon(path: &Path) -> Result<GenderLexicon> {
    let mut entries = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, got {:?}", trimmed),
            });
        }
        entries.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ));
    }
    if entries.is_empty() {
        return Err(CorpusError::EmptyLexicon(path.to_path_buf()));
    }
    GenderLexicon::from_entries(entries).map_err(|(word, first, second)| CorpusError::ConflictingWord {
        path: path.to_path_buf(),
        word,
        first,
        second,
    })
}
