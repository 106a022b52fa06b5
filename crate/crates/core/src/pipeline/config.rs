//! Run configuration: one TOML or JSON file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::attribution::{Aggregation, Granularity, Scope};
use crate::client::{BackendConfig, DecodingParams, TokenizerSource};
use crate::corpus::ContrastiveFormat;
use crate::perturb::Condition;
use crate::prompt::PromptKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// Reports go to `<output_dir>/<run_id>/`.
    pub output_dir: PathBuf,
    /// Instances per flush during backend stages.
    pub chunk_size: usize,
    pub data: DataConfig,
    pub prompt: PromptConfig,
    pub conditions: ConditionsConfig,
    pub backend: BackendConfig,
    pub decoding: DecodingParams,
    pub attribution: AttributionConfig,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            output_dir: "reports".into(),
            chunk_size: 64,
            data: DataConfig::default(),
            prompt: PromptConfig::default(),
            conditions: ConditionsConfig::default(),
            backend: BackendConfig::default(),
            decoding: DecodingParams::default(),
            attribution: AttributionConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub language_pair: String,
    pub src_lang_name: String,
    pub tgt_lang_name: String,
    /// Document-level parallel corpus for the translation task.
    pub documents: Option<PathBuf>,
    /// Keep only the first `n` sentences (corpus order).
    pub translation_items: Option<usize>,
    /// Contrastive pronoun set.
    pub contrastive: Option<PathBuf>,
    pub contrastive_format: ContrastiveFormat,
    /// Balanced subset size for the pronoun task.
    pub contrastive_items: Option<usize>,
    /// `word<TAB>pos<TAB>gender`; needed for antecedent swaps.
    pub lexicon: Option<PathBuf>,
    pub context_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            language_pair: "en-de".into(),
            src_lang_name: "English".into(),
            tgt_lang_name: "German".into(),
            documents: None,
            translation_items: None,
            contrastive: None,
            contrastive_format: ContrastiveFormat::Jsonl,
            contrastive_items: None,
            lexicon: None,
            context_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub translation_kinds: Vec<PromptKind>,
    pub pronoun_kinds: Vec<PromptKind>,
    pub chat_wrap: bool,
    /// Template overrides (`.toml` or `.json`).
    pub templates: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            translation_kinds: PromptKind::ALL.to_vec(),
            pronoun_kinds: vec![PromptKind::Sentence, PromptKind::Generic],
            chat_wrap: false,
            templates: None,
        }
    }
}

/// Context conditions for the context-using prompt kinds. The sentence
/// prompt always runs without context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionsConfig {
    pub translation: Vec<Condition>,
    pub pronoun: Vec<Condition>,
    /// Swap source-side antecedent mentions as well.
    pub swap_source_side: bool,
}

impl Default for ConditionsConfig {
    fn default() -> Self {
        let c = vec![Condition::Random, Condition::Perturbed, Condition::Gold];
        Self {
            translation: c.clone(),
            pronoun: c,
            swap_source_side: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAttribution {
    /// Label used in the figure data, e.g. `alti_logit`.
    pub method: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub erasure: bool,
    pub context_size: usize,
    /// Balanced subset size.
    pub items: Option<usize>,
    pub prompt_kind: PromptKind,
    pub scope: Scope,
    pub granularity: Granularity,
    pub aggregation: Aggregation,
    /// Precomputed `ap-v1` files to include in the figure data.
    pub external: Vec<ExternalAttribution>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            erasure: true,
            context_size: 2,
            items: None,
            prompt_kind: PromptKind::Generic,
            scope: Scope::Full,
            granularity: Granularity::Token,
            aggregation: Aggregation::MeanOfAps,
            external: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// JSONL `{id, score}` keyed by instance id.
    pub comet: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub max_parallel: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

fn config_err(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses a `.toml` or `.json` file and resolves relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| config_err("config", e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| config_err("config", e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.documents,
            &mut self.data.contrastive,
            &mut self.data.lexicon,
            &mut self.prompt.templates,
            &mut self.backend.cache_dir,
            &mut self.score.comet,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let ContrastiveFormat::Contrapro {
            context_src,
            context_tgt,
            ..
        } = &mut self.data.contrastive_format
        {
            fix(context_src);
            fix(context_tgt);
        }
        if let TokenizerSource::File { path } = &mut self.backend.tokenizer {
            fix(path);
        }
        for e in &mut self.attribution.external {
            fix(&mut e.path);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(u) = &o.base_url {
            self.backend.base_url = u.clone();
        }
        if let Some(m) = &o.model {
            self.backend.model_id = m.clone();
        }
        if let Some(p) = o.max_parallel {
            self.backend.max_parallel = p;
        }
        if let Some(d) = &o.cache_dir {
            self.backend.cache_dir = Some(d.clone());
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Checks every field that does not need the data files opened.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(config_err("run_id", "use letters, digits, '-', '_' or '.'"));
        }
        if self.chunk_size == 0 {
            return Err(config_err("chunk_size", "must be at least 1"));
        }
        let d = &self.data;
        if d.documents.is_none() && d.contrastive.is_none() {
            return Err(config_err("data", "set data.documents, data.contrastive or both"));
        }
        for (field, value) in [
            ("data.language_pair", &d.language_pair),
            ("data.src_lang_name", &d.src_lang_name),
            ("data.tgt_lang_name", &d.tgt_lang_name),
        ] {
            if value.trim().is_empty() {
                return Err(config_err(field, "must not be empty"));
            }
        }
        if d.context_size == 0 {
            return Err(config_err("data.context_size", "must be at least 1"));
        }
        for (field, path) in [
            ("data.documents", &d.documents),
            ("data.contrastive", &d.contrastive),
            ("data.lexicon", &d.lexicon),
            ("prompt.templates", &self.prompt.templates),
            ("score.comet", &self.score.comet),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(config_err(field, format!("{} does not exist", p.display())));
                }
            }
        }
        for (field, conditions) in [
            ("conditions.translation", &self.conditions.translation),
            ("conditions.pronoun", &self.conditions.pronoun),
        ] {
            if conditions.contains(&Condition::None) {
                return Err(config_err(field, "`none` is implied by the sentence prompt kind"));
            }
            let mut seen = conditions.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != conditions.len() {
                return Err(config_err(field, "duplicate condition"));
            }
        }
        if self
            .conditions
            .translation
            .contains(&Condition::AntecedentSwapped)
        {
            return Err(config_err(
                "conditions.translation",
                "antecedent_swapped needs antecedent annotations; use it under conditions.pronoun",
            ));
        }
        if self.conditions.pronoun.contains(&Condition::AntecedentSwapped) && d.lexicon.is_none() {
            return Err(config_err(
                "data.lexicon",
                "required when conditions.pronoun includes antecedent_swapped",
            ));
        }
        for (field, kinds) in [
            ("prompt.translation_kinds", &self.prompt.translation_kinds),
            ("prompt.pronoun_kinds", &self.prompt.pronoun_kinds),
        ] {
            let mut seen = kinds.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != kinds.len() {
                return Err(config_err(field, "duplicate prompt kind"));
            }
        }
        if self.attribution.context_size == 0 {
            return Err(config_err("attribution.context_size", "must be at least 1"));
        }
        if self.attribution.prompt_kind == PromptKind::Sentence {
            return Err(config_err(
                "attribution.prompt_kind",
                "attribution needs a context prompt",
            ));
        }
        for e in &self.attribution.external {
            if !e.path.is_file() {
                return Err(config_err(
                    "attribution.external.path",
                    format!("{} does not exist", e.path.display()),
                ));
            }
        }
        self.backend
            .validate()
            .map_err(|e| config_err("backend", e.to_string()))?;
        Ok(())
    }
}
