//! Model backend access: free generation, forced-decode scoring and
//! tokenization over the completions HTTP protocol.
//!
//! Every request goes through the same path: serialize the body, look it up
//! in the response cache, otherwise send it through a [`Transport`] with
//! retries. Mocks plug in at the transport level, so they exercise the same
//! wire format as real servers.

mod cache;
mod http;
pub mod wire;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{request_key, ResponseCache};
pub use http::HttpTransport;

use crate::prompt::RenderedPrompt;
use crate::tokenizer::VocabTokenizer;
use wire::{
    CompletionRequest, CompletionResponse, DetokenizeRequest, DetokenizeResponse, PromptInput,
    TokenizeRequest, TokenizeResponse,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("backend capability missing: {0}")]
    Capability(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused request with status {status} after {attempts} attempt(s): {body}")]
    Refused {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("unexpected backend response: {0}")]
    Protocol(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Text <-> token id conversion for one backend's vocabulary.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, ids: &[u32]) -> Result<String>;
    fn vocab_size(&self) -> Result<u32>;
}

/// Raw HTTP reply.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
    pub retry_after: Option<Duration>,
}

/// Sends one JSON POST. Connection-level failures are reported as `Err`.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &[u8]) -> std::result::Result<Reply, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSource {
    /// `POST <tokenizer_url>/tokenize` and `/detokenize`.
    #[default]
    Endpoint,
    /// A local vocabulary file (see [`VocabTokenizer::from_file`]).
    File {
        path: PathBuf,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Seconds.
    pub request_timeout: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub max_parallel: usize,
    pub cache_dir: Option<PathBuf>,
    /// Whether the server returns prompt log-probabilities with `echo`.
    pub echo_logprobs: bool,
    pub tokenizer: TokenizerSource,
    /// Root for tokenize/detokenize; defaults to `base_url`.
    pub tokenizer_url: Option<String>,
    pub vocab_size: Option<u32>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_id: String::new(),
            api_key_env: "CTXPROBE_API_KEY".into(),
            request_timeout: 120.0,
            max_retries: 3,
            retry_backoff_ms: 500,
            max_parallel: 4,
            cache_dir: None,
            echo_logprobs: true,
            tokenizer: TokenizerSource::Endpoint,
            tokenizer_url: None,
            vocab_size: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(ClientError::Config("max_parallel must be at least 1".into()));
        }
        if self.request_timeout.is_nan() || self.request_timeout <= 0.0 {
            return Err(ClientError::Config("request_timeout must be positive".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ClientError::Config("base_url is empty".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(ClientError::Config("model_id is empty".into()));
        }
        Ok(())
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{endpoint}", self.base_url.trim_end_matches('/'))
    }

    fn tokenizer_url(&self, endpoint: &str) -> String {
        let root = self.tokenizer_url.as_deref().unwrap_or(&self.base_url);
        format!("{}/{endpoint}", root.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    /// Greedy decoding of a single line.
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 0.0,
            stop: vec!["\n".into()],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: Option<String>,
    pub tokens_used: u64,
    pub cached: bool,
    pub attempts: u32,
}

/// Forced-decode log-probabilities of a continuation (natural log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoredSequence {
    pub tokens: Vec<String>,
    /// Empty when the backend does not report ids.
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl ScoredSequence {
    pub fn new(tokens: Vec<String>, token_ids: Vec<u32>, logprobs: Vec<f64>) -> Result<Self> {
        if tokens.len() != logprobs.len() || (!token_ids.is_empty() && token_ids.len() != logprobs.len()) {
            return Err(ClientError::Protocol(format!(
                "{} tokens, {} ids, {} logprobs",
                tokens.len(),
                token_ids.len(),
                logprobs.len()
            )));
        }
        if let Some(lp) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(ClientError::Protocol(format!("log-probability {lp} is not <= 0")));
        }
        let total_logprob = logprobs.iter().sum();
        Ok(Self {
            tokens,
            token_ids,
            logprobs,
            total_logprob,
        })
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// Probability of the whole sequence.
    pub fn probability(&self) -> f64 {
        self.total_logprob.exp()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub network_calls: u64,
}

/// Forced scoring of token-id sequences; what erasure attribution needs.
pub trait ForcedScoring: Sync {
    /// Log-probabilities of `continuation` following `prefix`.
    fn score_ids(&self, prefix: &[u32], continuation: &[u32]) -> Result<ScoredSequence>;

    fn max_parallel(&self) -> usize {
        1
    }
}

/// Thread-safe handle to one backend.
pub struct Client {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    local_tokenizer: Option<VocabTokenizer>,
    api_key_present: bool,
    hits: AtomicU64,
    misses: AtomicU64,
    network_calls: AtomicU64,
    vocab_size: Mutex<Option<u32>>,
    /// One gate per request key being fetched, so identical concurrent
    /// requests reach the network once.
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

struct CallInfo {
    cached: bool,
    attempts: u32,
}

fn is_transient(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

impl Client {
    /// Client over HTTP; the API key is read from `config.api_key_env`.
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let transport = HttpTransport::new(Duration::from_secs_f64(config.request_timeout), key.clone());
        let mut client = Self::with_transport(config, Arc::new(transport))?;
        client.api_key_present = key.is_some();
        Ok(client)
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        config.validate()?;
        let cache = match &config.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir)?),
            None => None,
        };
        let local_tokenizer = match &config.tokenizer {
            TokenizerSource::File { path } => Some(VocabTokenizer::from_file(path)?),
            _ => None,
        };
        Ok(Self {
            vocab_size: Mutex::new(config.vocab_size),
            config,
            transport,
            cache,
            local_tokenizer,
            api_key_present: false,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
            in_flight: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn has_api_key(&self) -> bool {
        self.api_key_present
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            network_calls: self.network_calls.load(Ordering::Relaxed),
        }
    }

    fn send_with_retries(&self, url: &str, body: &[u8]) -> Result<(Vec<u8>, u32)> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let (failure, retry_after) = match self.transport.post(url, body) {
                Ok(reply) if (200..300).contains(&reply.status) => return Ok((reply.body, attempts)),
                Ok(reply) if is_transient(reply.status) => {
                    (format!("status {}", reply.status), reply.retry_after)
                }
                Ok(reply) => {
                    return Err(ClientError::Refused {
                        status: reply.status,
                        attempts,
                        body: String::from_utf8_lossy(&reply.body).into_owned(),
                    })
                }
                Err(message) => (message, None),
            };
            if attempts > self.config.max_retries {
                return Err(ClientError::Transport {
                    attempts,
                    message: failure,
                });
            }
            let backoff = Duration::from_millis(
                self.config
                    .retry_backoff_ms
                    .saturating_mul(1 << (attempts - 1).min(10)),
            );
            let wait = retry_after.map_or(backoff, |r| r.min(Duration::from_secs(60)).max(backoff));
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
    }

    fn call<T: Serialize>(&self, url: &str, request: &T) -> Result<(Vec<u8>, CallInfo)> {
        let body = serde_json::to_vec(request).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let key = request_key(url, &self.config.model_id, &body);
        let Some(cache) = &self.cache else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            let (bytes, attempts) = self.send_with_retries(url, &body)?;
            return Ok((
                bytes,
                CallInfo {
                    cached: false,
                    attempts,
                },
            ));
        };
        let gate = self
            .in_flight
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let result = {
            let _held = gate.lock().unwrap_or_else(|e| e.into_inner());
            match cache.get(&key) {
                Some(bytes) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    Ok((
                        bytes,
                        CallInfo {
                            cached: true,
                            attempts: 0,
                        },
                    ))
                }
                None => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    self.send_with_retries(url, &body).and_then(|(bytes, attempts)| {
                        cache.put(&key, url, &self.config.model_id, &bytes)?;
                        Ok((
                            bytes,
                            CallInfo {
                                cached: false,
                                attempts,
                            },
                        ))
                    })
                }
            }
        };
        let mut gates = self.in_flight.lock().unwrap();
        if Arc::strong_count(&gate) == 2 {
            gates.remove(&key);
        }
        result
    }

    fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
        serde_json::from_slice(bytes).map_err(|e| {
            ClientError::Protocol(format!(
                "{e}: {}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(200)])
            ))
        })
    }

    pub fn generate(&self, prompt: &RenderedPrompt, params: &DecodingParams) -> Result<GenerationResult> {
        let request = CompletionRequest {
            model: self.config.model_id.clone(),
            prompt: PromptInput::Text(prompt.text.clone()),
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            echo: false,
            logprobs: None,
            stop: params.stop.clone(),
            seed: params.seed,
        };
        let (bytes, info) = self.call(&self.config.url("completions"), &request)?;
        let response: CompletionResponse = Self::parse(&bytes)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Protocol("response has no choices".into()))?;
        Ok(GenerationResult {
            text: choice.text,
            finish_reason: choice.finish_reason,
            tokens_used: response.usage.map_or(0, |u| u.total_tokens),
            cached: info.cached,
            attempts: info.attempts,
        })
    }

    /// Forced-scoring handle; fails up front when the backend cannot echo
    /// log-probabilities.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        if !self.config.echo_logprobs {
            return Err(ClientError::Capability(format!(
                "backend {} does not return echoed log-probabilities",
                self.config.base_url
            )));
        }
        Ok(Scorer { client: self })
    }

    fn echo_logprobs(&self, prompt: PromptInput) -> Result<wire::Logprobs> {
        let request = CompletionRequest {
            model: self.config.model_id.clone(),
            prompt,
            max_tokens: 0,
            temperature: 0.0,
            echo: true,
            logprobs: Some(0),
            stop: Vec::new(),
            seed: None,
        };
        let (bytes, _) = self.call(&self.config.url("completions"), &request)?;
        let response: CompletionResponse = Self::parse(&bytes)?;
        response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| ClientError::Protocol("echo response carries no logprobs".into()))
    }

    /// Runs `f` over `items` with at most `max_parallel` calls in flight.
    pub fn map_bounded<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        bounded_map(self.config.max_parallel, items, f)
    }

    fn local_or_endpoint(&self) -> Result<Option<&VocabTokenizer>> {
        match &self.config.tokenizer {
            TokenizerSource::File { .. } => Ok(self.local_tokenizer.as_ref()),
            TokenizerSource::Endpoint => Ok(None),
            TokenizerSource::None => Err(ClientError::Capability(
                "no tokenizer endpoint or local tokenizer file configured".into(),
            )),
        }
    }
}

impl Tokenizer for Client {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if let Some(local) = self.local_or_endpoint()? {
            return local.encode_text(text);
        }
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let request = TokenizeRequest {
            model: self.config.model_id.clone(),
            prompt: text.to_string(),
            add_special_tokens: false,
        };
        let (bytes, _) = self.call(&self.config.tokenizer_url("tokenize"), &request)?;
        let response: TokenizeResponse = Self::parse(&bytes)?;
        if let Some(v) = response.vocab_size {
            self.vocab_size.lock().unwrap().get_or_insert(v);
        }
        Ok(response.tokens)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        if let Some(local) = self.local_or_endpoint()? {
            return local.decode_ids(ids);
        }
        if ids.is_empty() {
            return Ok(String::new());
        }
        let request = DetokenizeRequest {
            model: self.config.model_id.clone(),
            tokens: ids.to_vec(),
        };
        let (bytes, _) = self.call(&self.config.tokenizer_url("detokenize"), &request)?;
        let response: DetokenizeResponse = Self::parse(&bytes)?;
        Ok(response.prompt)
    }

    fn vocab_size(&self) -> Result<u32> {
        if let Some(v) = *self.vocab_size.lock().unwrap() {
            return Ok(v);
        }
        if let Some(local) = self.local_or_endpoint()? {
            return Ok(local.len() as u32);
        }
        let request = TokenizeRequest {
            model: self.config.model_id.clone(),
            prompt: " ".into(),
            add_special_tokens: false,
        };
        let (bytes, _) = self.call(&self.config.tokenizer_url("tokenize"), &request)?;
        let response: TokenizeResponse = Self::parse(&bytes)?;
        let size = response.vocab_size.ok_or_else(|| {
            ClientError::Capability("vocabulary size unknown; set backend.vocab_size".into())
        })?;
        *self.vocab_size.lock().unwrap() = Some(size);
        Ok(size)
    }
}

pub struct Scorer<'a> {
    client: &'a Client,
}

impl Scorer<'_> {
    /// Log-probabilities of `continuation` appended to the prompt.
    ///
    /// The backend tokenizes prompt and continuation together; every token
    /// that ends past the prompt text belongs to the continuation, so a token
    /// straddling the boundary is attributed to the continuation.
    pub fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<ScoredSequence> {
        self.score_text(&prompt.text, continuation)
    }

    pub fn score_text(&self, prefix: &str, continuation: &str) -> Result<ScoredSequence> {
        if continuation.is_empty() {
            return Ok(ScoredSequence::default());
        }
        let full = format!("{prefix}{continuation}");
        let logprobs = self.client.echo_logprobs(PromptInput::Text(full.clone()))?;
        let n = logprobs.tokens.len();
        if logprobs.token_logprobs.len() != n || logprobs.text_offset.len() != n {
            return Err(ClientError::Protocol(
                "echo logprobs lack aligned token_logprobs/text_offset".into(),
            ));
        }
        let boundary = prefix.chars().count();
        let total = full.chars().count();
        let mut tokens = Vec::new();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            let end = logprobs.text_offset.get(i + 1).copied().unwrap_or(total);
            if end <= boundary {
                continue;
            }
            let value = logprobs.token_logprobs[i].ok_or_else(|| {
                ClientError::Protocol(format!("no log-probability for continuation token {i}"))
            })?;
            tokens.push(logprobs.tokens[i].clone());
            if let Some(all) = &logprobs.token_ids {
                ids.push(
                    *all.get(i)
                        .ok_or_else(|| ClientError::Protocol("token_ids shorter than tokens".into()))?,
                );
            }
            values.push(value);
        }
        ScoredSequence::new(tokens, ids, values)
    }
}

impl ForcedScoring for Scorer<'_> {
    fn score_ids(&self, prefix: &[u32], continuation: &[u32]) -> Result<ScoredSequence> {
        if continuation.is_empty() {
            return Ok(ScoredSequence::default());
        }
        let mut all = prefix.to_vec();
        all.extend_from_slice(continuation);
        let logprobs = self.client.echo_logprobs(PromptInput::Tokens(all))?;
        let n = logprobs.tokens.len();
        if logprobs.token_logprobs.len() != n || n < continuation.len() {
            return Err(ClientError::Protocol(format!(
                "echo returned {n} tokens for a {}-token continuation",
                continuation.len()
            )));
        }
        let start = n - continuation.len();
        let values = logprobs.token_logprobs[start..]
            .iter()
            .map(|v| v.ok_or_else(|| ClientError::Protocol("missing continuation log-probability".into())))
            .collect::<Result<Vec<f64>>>()?;
        ScoredSequence::new(logprobs.tokens[start..].to_vec(), continuation.to_vec(), values)
    }

    fn max_parallel(&self) -> usize {
        self.client.config.max_parallel
    }
}

/// Maps `f` over `items` on at most `parallel` worker threads. Output order
/// follows input order regardless of completion order.
pub fn bounded_map<T: Sync, R: Send>(parallel: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = parallel.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let value = f(&items[i]);
                *slots[i].lock().unwrap() = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
