//! Local vocabulary tokenizer.
//!
//! Greedy longest-match over a piece list, with `<0xNN>` byte pieces as a
//! fallback for characters no piece covers. This is the file-backed
//! tokenizer source of the client and the tokenizer of the mock backends.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, Tokenizer};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    pieces: Vec<String>,
    #[serde(default)]
    special: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    pieces: Vec<String>,
    special: HashSet<u32>,
    lookup: HashMap<String, u32>,
    bytes: [Option<u32>; 256],
    max_piece_len: usize,
}

fn byte_piece(piece: &str) -> Option<u8> {
    let hex = piece.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl VocabTokenizer {
    pub fn new(pieces: Vec<String>, special: impl IntoIterator<Item = u32>) -> Self {
        let special: HashSet<u32> = special.into_iter().collect();
        let mut lookup = HashMap::new();
        let mut bytes = [None; 256];
        let mut max_piece_len = 1;
        for (id, piece) in pieces.iter().enumerate() {
            let id = id as u32;
            if special.contains(&id) || piece.is_empty() {
                continue;
            }
            if let Some(b) = byte_piece(piece) {
                bytes[b as usize].get_or_insert(id);
                continue;
            }
            lookup.entry(piece.clone()).or_insert(id);
            max_piece_len = max_piece_len.max(piece.len());
        }
        Self {
            pieces,
            special,
            lookup,
            bytes,
            max_piece_len,
        }
    }

    /// Reads `{"pieces": [...], "special": [ids]}`.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Capability(format!("tokenizer file {}: {e}", path.display())))?;
        let file: VocabFile = serde_json::from_str(&text)
            .map_err(|e| ClientError::Capability(format!("tokenizer file {}: {e}", path.display())))?;
        Ok(Self::new(file.pieces, file.special))
    }

    pub fn to_json(&self) -> String {
        let mut special: Vec<u32> = self.special.iter().copied().collect();
        special.sort_unstable();
        serde_json::to_string(&VocabFile {
            pieces: self.pieces.clone(),
            special,
        })
        .expect("vocab serializes")
    }

    /// Builds a vocabulary from sample text: specials, 256 byte pieces,
    /// every character seen, then the most frequent words (bare and with a
    /// leading space) up to `max_words` entries.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut pieces: Vec<String> = vec!["<s>".into(), "</s>".into()];
        pieces.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        let mut chars = std::collections::BTreeSet::new();
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            chars.extend(text.chars().filter(|c| !c.is_control()));
            for word in text.split_whitespace() {
                let core = word.trim_matches(|c: char| !c.is_alphanumeric());
                if core.chars().count() > 1 {
                    *words.entry(core.to_string()).or_default() += 1;
                }
            }
        }
        let mut seen: HashSet<String> = pieces.iter().cloned().collect();
        for c in chars {
            let s = c.to_string();
            if seen.insert(s.clone()) {
                pieces.push(s);
            }
        }
        let mut ranked: Vec<(String, usize)> = words.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (word, _) in ranked.into_iter().take(max_words) {
            for piece in [word.clone(), format!(" {word}")] {
                if seen.insert(piece.clone()) {
                    pieces.push(piece);
                }
            }
        }
        Self::new(pieces, [0, 1])
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Bytes a token contributes to decoded text; empty for specials.
    pub fn token_bytes(&self, id: u32) -> Option<Vec<u8>> {
        let piece = self.piece(id)?;
        if self.special.contains(&id) {
            return Some(Vec::new());
        }
        Some(match byte_piece(piece) {
            Some(b) => vec![b],
            None => piece.as_bytes().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Ids suitable for random sampling: no specials, no byte pieces, no
    /// pieces containing control characters.
    pub fn sampling_vocab(&self) -> Vec<u32> {
        (0..self.pieces.len() as u32)
            .filter(|id| {
                let piece = &self.pieces[*id as usize];
                !self.special.contains(id)
                    && byte_piece(piece).is_none()
                    && !piece.is_empty()
                    && !piece.chars().any(char::is_control)
            })
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>, ClientError> {
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let mut len = rest.len().min(self.max_piece_len);
            let mut matched = None;
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(&id) = self.lookup.get(&rest[..len]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                len -= 1;
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    let c = rest.chars().next().expect("non-empty");
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        let id = self.bytes[b as usize].ok_or_else(|| {
                            ClientError::Capability(format!("tokenizer cannot encode {c:?}"))
                        })?;
                        ids.push(id);
                    }
                    pos += c.len_utf8();
                }
            }
        }
        Ok(ids)
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<String, ClientError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let piece = self
                .piece(id)
                .ok_or_else(|| ClientError::Protocol(format!("token id {id} outside vocabulary")))?;
            if self.special.contains(&id) {
                continue;
            }
            match byte_piece(piece) {
                Some(b) => bytes.push(b),
                None => bytes.extend_from_slice(piece.as_bytes()),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

impl Tokenizer for VocabTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, ClientError> {
        self.encode_text(text)
    }

    fn decode(&self, ids: &[u32]) -> Result<String, ClientError> {
        self.decode_ids(ids)
    }

    fn vocab_size(&self) -> Result<u32, ClientError> {
        Ok(self.pieces.len() as u32)
    }
}
