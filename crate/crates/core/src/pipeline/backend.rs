//! Opening the configured backend, including in-process `mock://` models.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{PipelineError, Result, RunConfig, RunData};
use crate::client::{BackendConfig, Client, Tokenizer, TokenizerSource, Transport};
use crate::mock::{EchoModel, LookupTranslator, MockServer, RandomScoreModel, UniformModel};
use crate::tokenizer::VocabTokenizer;

/// A parsed `mock://<name>?<key>=<value>&...` base URL.
#[derive(Debug, Clone, PartialEq)]
pub struct MockSpec {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

impl MockSpec {
    pub fn parse(base_url: &str) -> Option<Self> {
        let rest = base_url.strip_prefix("mock://")?;
        let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
        let params = query
            .split('&')
            .filter(|kv| !kv.is_empty())
            .map(|kv| {
                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        Some(Self {
            name: name.trim_end_matches('/').to_string(),
            params,
        })
    }

    fn number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| PipelineError::Config {
                field: "backend.base_url".into(),
                message: format!("mock parameter {key}={v:?} is not a number"),
            }),
        }
    }
}

const MOCK_MAX_WORDS: usize = 50_000;

/// The in-process server for a `mock://` base URL, or `None` for real
/// backends. Its vocabulary is built from the run's data, so it is the same
/// in every stage.
///
/// Models: `lookup` (`seed`, `drop`) translates from the data's parallel
/// text and scores with i.i.d. random log-probabilities; `random-scores`
/// (`seed`); `uniform`; `echo`.
pub fn mock_server(config: &RunConfig, data: &RunData) -> Result<Option<MockServer>> {
    let Some(spec) = MockSpec::parse(&config.backend.base_url) else {
        return Ok(None);
    };
    let mut texts: Vec<&str> = Vec::new();
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(corpus) = &data.documents {
        for doc in corpus.documents() {
            for p in &doc.sentences {
                texts.push(&p.src);
                texts.push(p.tgt_text());
                pairs.push((p.src.clone(), p.tgt_text().to_string()));
            }
        }
    }
    for ex in &data.all_examples {
        texts.push(&ex.src);
        texts.push(&ex.gold_target);
        texts.extend(ex.contrastive_targets.iter().map(String::as_str));
        pairs.push((ex.src.clone(), ex.gold_target.clone()));
        for p in &ex.context {
            texts.push(&p.src);
            texts.push(p.tgt_text());
            pairs.push((p.src.clone(), p.tgt_text().to_string()));
        }
    }
    let tokenizer = VocabTokenizer::from_texts(texts, MOCK_MAX_WORDS);
    let vocab_size = tokenizer.len() as u32;
    let seed = spec.number("seed", 0u64)?;
    let server = match spec.name.as_str() {
        "lookup" => MockServer::new(
            tokenizer,
            LookupTranslator::new(pairs, spec.number("drop", 0.1f64)?, seed),
        ),
        "random-scores" => MockServer::new(tokenizer, RandomScoreModel { seed }),
        "uniform" => MockServer::new(tokenizer, UniformModel { vocab_size }),
        "echo" => MockServer::new(tokenizer, EchoModel { vocab_size }),
        other => {
            return Err(PipelineError::Config {
                field: "backend.base_url".into(),
                message: format!("unknown mock model {other:?}"),
            })
        }
    };
    Ok(Some(server))
}

/// The configured client, plus the mock behind it when there is one.
pub struct Backend {
    pub client: Client,
    pub mock: Option<Arc<MockServer>>,
}

impl Backend {
    /// HTTP client, or an in-process mock for `mock://` URLs. The response
    /// cache defaults to `<output_dir>/cache`.
    pub fn open(config: &RunConfig, data: &RunData) -> Result<Self> {
        match mock_server(config, data)? {
            Some(server) => {
                let server = server.into_shared();
                let transport: Arc<dyn Transport> = server.clone();
                Self::with_transport(config, transport, Some(server))
            }
            None => {
                let client = Client::new(backend_config(config)).map_err(|e| PipelineError::Config {
                    field: "backend".into(),
                    message: e.to_string(),
                })?;
                Ok(Self { client, mock: None })
            }
        }
    }

    pub fn with_transport(
        config: &RunConfig,
        transport: Arc<dyn Transport>,
        mock: Option<Arc<MockServer>>,
    ) -> Result<Self> {
        let mut bc = backend_config(config);
        if mock.is_some() && bc.tokenizer == TokenizerSource::None {
            bc.tokenizer = TokenizerSource::Endpoint;
        }
        let client = Client::with_transport(bc, transport).map_err(|e| PipelineError::Config {
            field: "backend".into(),
            message: e.to_string(),
        })?;
        Ok(Self { client, mock })
    }

    /// Token ids random contexts are drawn from.
    pub fn sampling_vocab(&self) -> Result<Vec<u32>> {
        if let Some(mock) = &self.mock {
            return Ok(mock.tokenizer().sampling_vocab());
        }
        let size = self
            .client
            .vocab_size()
            .map_err(|e| PipelineError::Backend(e.to_string()))?;
        Ok((0..size).collect())
    }
}

fn backend_config(config: &RunConfig) -> BackendConfig {
    let mut bc = config.backend.clone();
    if bc.cache_dir.is_none() {
        bc.cache_dir = Some(config.output_dir.join("cache"));
    }
    bc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mock_urls() {
        let s = MockSpec::parse("mock://lookup?seed=3&drop=0.2").unwrap();
        assert_eq!(s.name, "lookup");
        assert_eq!(s.params["seed"], "3");
        assert_eq!(s.number("drop", 0.0f64).unwrap(), 0.2);
        assert_eq!(MockSpec::parse("mock://echo").unwrap().params.len(), 0);
        assert!(MockSpec::parse("http://localhost:8000/v1").is_none());
    }
}
