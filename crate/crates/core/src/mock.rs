//! In-process backends that speak the completions protocol.
//!
//! [`MockServer`] implements [`Transport`], so a [`Client`](crate::client::Client)
//! talks to it exactly as it would to a remote server: cache, retries and
//! response parsing all run. The language model behind it is pluggable.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde_json::{json, Value};

use crate::client::{Reply, Transport};
use crate::tokenizer::VocabTokenizer;

/// A toy language model over token ids.
pub trait MockModel: Send + Sync {
    /// Natural-log probability of `next` given `prefix`.
    fn logprob(&self, prefix: &[u32], next: u32) -> f64;

    /// Log-probability of every token after the first.
    fn sequence_logprobs(&self, ids: &[u32]) -> Vec<f64> {
        (1..ids.len()).map(|i| self.logprob(&ids[..i], ids[i])).collect()
    }

    /// Free generation for a text prompt.
    fn generate(&self, prompt: &str) -> String {
        let _ = prompt;
        String::new()
    }
}

/// Generation echoes the prompt; scoring is uniform.
pub struct EchoModel {
    pub vocab_size: u32,
}

impl MockModel for EchoModel {
    fn logprob(&self, _prefix: &[u32], _next: u32) -> f64 {
        -(self.vocab_size as f64).ln()
    }

    fn generate(&self, prompt: &str) -> String {
        prompt.to_string()
    }
}

/// Every token has probability `1 / vocab_size`.
pub struct UniformModel {
    pub vocab_size: u32,
}

impl MockModel for UniformModel {
    fn logprob(&self, _prefix: &[u32], _next: u32) -> f64 {
        -(self.vocab_size as f64).ln()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn extend_state(state: u64, id: u32) -> u64 {
    mix(state ^ (id as u64).wrapping_mul(0x100_0000_01B3))
}

fn prefix_state(seed: u64, prefix: &[u32]) -> u64 {
    prefix.iter().fold(mix(seed), |h, &id| extend_state(h, id))
}

/// Uniform on (0, 1], keyed by the prefix state and the next token.
fn unit_from_state(state: u64, next: u32) -> f64 {
    let bits = mix(state ^ mix(next as u64 ^ 0xA5A5_A5A5));
    ((bits >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

fn unit_interval(seed: u64, prefix: &[u32], next: u32) -> f64 {
    unit_from_state(prefix_state(seed, prefix), next)
}

/// Log-probabilities `ln(u)` with `u` uniform on (0, 1], independent for
/// every `(prefix, token)` pair and fixed by `seed`.
pub struct RandomScoreModel {
    pub seed: u64,
}

impl MockModel for RandomScoreModel {
    fn logprob(&self, prefix: &[u32], next: u32) -> f64 {
        unit_interval(self.seed, prefix, next).ln()
    }

    fn sequence_logprobs(&self, ids: &[u32]) -> Vec<f64> {
        let mut state = mix(self.seed);
        let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
        for w in ids.windows(2) {
            state = extend_state(state, w[0]);
            out.push(unit_from_state(state, w[1]).ln());
        }
        out
    }
}

/// Context-free per-token table; unlisted tokens get `default`.
pub struct TableModel {
    pub logprobs: HashMap<u32, f64>,
    pub default: f64,
}

impl MockModel for TableModel {
    fn logprob(&self, _prefix: &[u32], next: u32) -> f64 {
        self.logprobs.get(&next).copied().unwrap_or(self.default)
    }
}

/// The probability of `target` depends on whether `keyword` occurs in the
/// prefix: `p_present` if so, `p_absent` otherwise. Other tokens share the
/// remaining mass uniformly.
pub struct KeywordModel {
    pub keyword: u32,
    pub target: u32,
    pub p_present: f64,
    pub p_absent: f64,
    pub vocab_size: u32,
}

impl MockModel for KeywordModel {
    fn logprob(&self, prefix: &[u32], next: u32) -> f64 {
        let p = if prefix.contains(&self.keyword) {
            self.p_present
        } else {
            self.p_absent
        };
        if next == self.target {
            p.ln()
        } else {
            ((1.0 - p) / (self.vocab_size as f64 - 1.0)).ln()
        }
    }
}

/// Translates by looking the query sentence up in a parallel table.
///
/// The query is the last prompt line shaped like `<lang>: <src> <lang>:`.
/// Each reference word is dropped with probability `drop_rate`, decided by
/// hashing the whole prompt, so different contexts give different (but
/// reproducible) outputs. Unknown sentences are echoed back.
pub struct LookupTranslator {
    table: HashMap<String, String>,
    drop_rate: f64,
    seed: u64,
    query: Regex,
}

impl LookupTranslator {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>, drop_rate: f64, seed: u64) -> Self {
        Self {
            table: pairs.into_iter().collect(),
            drop_rate,
            seed,
            query: Regex::new(r"^[^:\n]+: (.+) [^\s:]+:\s*$").expect("valid regex"),
        }
    }
}

impl MockModel for LookupTranslator {
    fn logprob(&self, prefix: &[u32], next: u32) -> f64 {
        unit_interval(self.seed, prefix, next).ln()
    }

    fn sequence_logprobs(&self, ids: &[u32]) -> Vec<f64> {
        RandomScoreModel { seed: self.seed }.sequence_logprobs(ids)
    }

    fn generate(&self, prompt: &str) -> String {
        let Some(src) = prompt
            .lines()
            .rev()
            .find_map(|line| self.query.captures(line).map(|c| c[1].to_string()))
        else {
            return String::new();
        };
        let Some(reference) = self.table.get(&src) else {
            return src;
        };
        let prompt_ids: Vec<u32> = prompt.bytes().map(u32::from).collect();
        let kept: Vec<&str> = reference
            .split(' ')
            .enumerate()
            .filter(|(i, _)| unit_interval(self.seed, &prompt_ids, *i as u32) >= self.drop_rate)
            .map(|(_, w)| w)
            .collect();
        if kept.is_empty() {
            reference.clone()
        } else {
            kept.join(" ")
        }
    }
}

/// Completions-protocol server running in-process.
pub struct MockServer {
    tokenizer: VocabTokenizer,
    model: Box<dyn MockModel>,
    echo_supported: bool,
    latency: Duration,
    failures: Mutex<VecDeque<u16>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockServer {
    pub fn new(tokenizer: VocabTokenizer, model: impl MockModel + 'static) -> Self {
        Self {
            tokenizer,
            model: Box::new(model),
            echo_supported: true,
            latency: Duration::ZERO,
            failures: Mutex::new(VecDeque::new()),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Rejects echo scoring requests with 400, like servers that do not
    /// return prompt log-probabilities.
    pub fn without_echo(mut self) -> Self {
        self.echo_supported = false;
        self
    }

    /// The next requests fail with these statuses, in order.
    pub fn fail_next(&self, statuses: impl IntoIterator<Item = u16>) {
        self.failures.lock().unwrap().extend(statuses);
    }

    pub fn into_shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn tokenizer(&self) -> &VocabTokenizer {
        &self.tokenizer
    }

    /// Requests received, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn completions(&self, body: &Value) -> Result<Value, (u16, String)> {
        let bad = |m: &str| (400, m.to_string());
        let echo = body["echo"].as_bool().unwrap_or(false);
        let max_tokens = body["max_tokens"].as_u64().unwrap_or(16) as usize;
        let want_logprobs = !body["logprobs"].is_null();
        let (prompt_text, prompt_ids) = match &body["prompt"] {
            Value::String(s) => (
                s.clone(),
                self.tokenizer.encode_text(s).map_err(|e| bad(&e.to_string()))?,
            ),
            Value::Array(items) => {
                let ids: Vec<u32> = items
                    .iter()
                    .map(|v| {
                        v.as_u64()
                            .map(|x| x as u32)
                            .ok_or_else(|| bad("non-integer token"))
                    })
                    .collect::<Result<_, _>>()?;
                if ids.iter().any(|&id| id as usize >= self.tokenizer.len()) {
                    return Err(bad("token id outside vocabulary"));
                }
                (
                    self.tokenizer.decode_ids(&ids).map_err(|e| bad(&e.to_string()))?,
                    ids,
                )
            }
            _ => return Err(bad("prompt must be a string or a list of token ids")),
        };

        if echo && want_logprobs {
            if !self.echo_supported {
                return Err(bad("echo with logprobs is not supported"));
            }
            let scores = self.model.sequence_logprobs(&prompt_ids);
            let mut tokens = Vec::with_capacity(prompt_ids.len());
            let mut logprobs = Vec::with_capacity(prompt_ids.len());
            let mut offsets = Vec::with_capacity(prompt_ids.len());
            // Character offsets, counting only complete UTF-8 sequences as
            // settled so byte-fallback tokens are handled in one pass.
            let mut bytes: Vec<u8> = Vec::new();
            let (mut settled, mut settled_chars) = (0usize, 0usize);
            for i in 0..prompt_ids.len() {
                let pending = String::from_utf8_lossy(&bytes[settled..]).chars().count();
                offsets.push(settled_chars + pending);
                let piece = self.tokenizer.token_bytes(prompt_ids[i]).unwrap_or_default();
                tokens.push(String::from_utf8_lossy(&piece).into_owned());
                bytes.extend_from_slice(&piece);
                let valid = match std::str::from_utf8(&bytes[settled..]) {
                    Ok(s) => s.len(),
                    Err(e) => e.valid_up_to(),
                };
                settled_chars += std::str::from_utf8(&bytes[settled..settled + valid])
                    .expect("validated")
                    .chars()
                    .count();
                settled += valid;
                logprobs.push(if i == 0 { Value::Null } else { json!(scores[i - 1]) });
            }
            return Ok(json!({
                "object": "text_completion",
                "model": body["model"],
                "choices": [{
                    "index": 0,
                    "text": prompt_text,
                    "finish_reason": "length",
                    "logprobs": {
                        "tokens": tokens,
                        "token_logprobs": logprobs,
                        "text_offset": offsets,
                        "token_ids": prompt_ids,
                    }
                }],
                "usage": {"prompt_tokens": prompt_ids.len(), "completion_tokens": 0,
                          "total_tokens": prompt_ids.len()}
            }));
        }

        let mut text = self.model.generate(&prompt_text);
        let mut finish = "stop";
        if let Some(stops) = body["stop"].as_array() {
            for stop in stops.iter().filter_map(Value::as_str) {
                if let Some(pos) = text.find(stop) {
                    text.truncate(pos);
                }
            }
        }
        let mut ids = self
            .tokenizer
            .encode_text(&text)
            .map_err(|e| bad(&e.to_string()))?;
        if ids.len() > max_tokens {
            ids.truncate(max_tokens);
            text = self.tokenizer.decode_ids(&ids).unwrap_or_default();
            finish = "length";
        }
        Ok(json!({
            "object": "text_completion",
            "model": body["model"],
            "choices": [{"index": 0, "text": text, "finish_reason": finish, "logprobs": null}],
            "usage": {"prompt_tokens": prompt_ids.len(), "completion_tokens": ids.len(),
                      "total_tokens": prompt_ids.len() + ids.len()}
        }))
    }

    fn handle(&self, url: &str, body: &[u8]) -> Result<Value, (u16, String)> {
        let body: Value = serde_json::from_slice(body).map_err(|e| (400, e.to_string()))?;
        if url.ends_with("/completions") {
            self.completions(&body)
        } else if url.ends_with("/tokenize") {
            let text = body["prompt"]
                .as_str()
                .ok_or((400, "missing prompt".to_string()))?;
            let tokens = self
                .tokenizer
                .encode_text(text)
                .map_err(|e| (400, e.to_string()))?;
            Ok(json!({"tokens": tokens, "count": tokens.len(), "vocab_size": self.tokenizer.len()}))
        } else if url.ends_with("/detokenize") {
            let ids: Vec<u32> =
                serde_json::from_value(body["tokens"].clone()).map_err(|e| (400, e.to_string()))?;
            let text = self
                .tokenizer
                .decode_ids(&ids)
                .map_err(|e| (400, e.to_string()))?;
            Ok(json!({"prompt": text}))
        } else {
            Err((404, format!("no route for {url}")))
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Transport for MockServer {
    fn post(&self, url: &str, body: &[u8]) -> Result<Reply, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        if let Some(status) = self.failures.lock().unwrap().pop_front() {
            return Ok(Reply {
                status,
                body: br#"{"error":"injected failure"}"#.to_vec(),
                retry_after: None,
            });
        }
        let (status, value) = match self.handle(url, body) {
            Ok(v) => (200, v),
            Err((status, message)) => (status, json!({"error": message})),
        };
        Ok(Reply {
            status,
            body: serde_json::to_vec(&value).expect("json serializes"),
            retry_after: None,
        })
    }
}

/// A transport that always fails at the connection level.
pub struct Unreachable;

impl Transport for Unreachable {
    fn post(&self, url: &str, _body: &[u8]) -> Result<Reply, String> {
        Err(format!("connection refused: {url}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_translator_finds_query_line() {
        let model = LookupTranslator::new([("Hello.".to_string(), "Hallo Welt.".to_string())], 0.0, 1);
        let prompt = "English: x German: y\nEnglish: Hello. German: ";
        assert_eq!(model.generate(prompt), "Hallo Welt.");
        assert_eq!(model.generate("English: Bye. German:"), "Bye.");
    }

    #[test]
    fn random_scores_are_in_unit_interval() {
        for i in 0..1000 {
            let u = unit_interval(3, &[i, i + 1], i);
            assert!(u > 0.0 && u <= 1.0);
        }
    }
}
