//! End-to-end runs: `prepare`, `translate`, `contrast`, `attribute`, `score`.
//!
//! Every stage reads the run configuration and works inside
//! `<output_dir>/<run_id>/`:
//!
//! ```text
//! instances.jsonl            prepared prompts, one per (item, prompt kind, condition)
//! outputs/translations.jsonl free generations
//! judgments/cpr.jsonl        contrastive judgments
//! judgments/gpr.jsonl        generative judgments (written by `score`)
//! attributions/erasure.jsonl ap-v1 vectors
//! tables/  figures/          report files
//! results.json  run.json
//! resume.json                present only after an interrupted stage
//! ```
//!
//! Backend stages append finished rows chunk by chunk and skip rows already
//! on disk, so an interrupted stage resumes where it stopped.

mod backend;
mod config;
mod prepare;
mod run;
mod score;

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{mock_server, Backend, MockSpec};
pub use config::{
    AttributionConfig, ConditionsConfig, DataConfig, ExternalAttribution, Overrides, PromptConfig, RunConfig,
    ScoreConfig,
};
pub use prepare::{load_data, prepare, PrepareSummary, RunData};
pub use run::{attribute, contrast, translate, StageSummary};
pub use score::{score, ScoreSummary};

use crate::corpus::ContrastiveExample;
use crate::perturb::{Condition, ContextWindow};
use crate::prompt::{PromptKind, RenderedPrompt};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl PipelineError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => 2,
            PipelineError::Backend(_) => 3,
            PipelineError::Data(_) => 4,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationInstance {
    pub instance_id: String,
    /// `<doc_id>#<sentence index>`.
    pub item_id: String,
    pub prompt_kind: PromptKind,
    pub condition: Condition,
    pub context: ContextWindow,
    pub src: String,
    pub reference: String,
    pub prompt: RenderedPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounInstance {
    pub instance_id: String,
    pub example_id: String,
    pub prompt_kind: PromptKind,
    pub condition: Condition,
    pub context: ContextWindow,
    pub src: String,
    pub gold_target: String,
    pub contrastive_targets: Vec<String>,
    pub gold_pronoun: String,
    pub contrastive_pronouns: Vec<String>,
    pub prompt: RenderedPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionInstance {
    pub instance_id: String,
    pub prompt_kind: PromptKind,
    /// The example with its context cut to the attribution window.
    pub example: ContrastiveExample,
    pub prompt: RenderedPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Instance {
    Translation(TranslationInstance),
    Pronoun(PronounInstance),
    Attribution(AttributionInstance),
}

impl Instance {
    pub fn id(&self) -> &str {
        match self {
            Instance::Translation(t) => &t.instance_id,
            Instance::Pronoun(p) => &p.instance_id,
            Instance::Attribution(a) => &a.instance_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub instance_id: String,
    pub hypothesis: String,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRow {
    pub instance_id: String,
    pub example_id: String,
    pub prompt_kind: PromptKind,
    pub condition: Condition,
    pub judgment: crate::metrics::PronounJudgment,
}

/// Written when a backend stage stops early; rerunning the stage resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeToken {
    pub stage: String,
    pub completed: usize,
    pub total: usize,
    pub next_instance_id: String,
    pub error: String,
}

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const TRANSLATIONS_FILE: &str = "outputs/translations.jsonl";
pub const CPR_FILE: &str = "judgments/cpr.jsonl";
pub const GPR_FILE: &str = "judgments/gpr.jsonl";
pub const ERASURE_FILE: &str = "attributions/erasure.jsonl";
pub const RESUME_FILE: &str = "resume.json";

pub fn read_instances(run_dir: &Path) -> Result<Vec<Instance>> {
    let path = run_dir.join(INSTANCES_FILE);
    if !path.is_file() {
        return Err(PipelineError::Data(format!(
            "{} not found; run `prepare` first",
            path.display()
        )));
    }
    read_jsonl(&path)
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Ids already present in an append-only output file. A trailing line that
/// does not parse (an interrupted write) is cut off.
fn completed_ids(path: &Path, key: &str) -> Result<HashSet<String>> {
    let mut done = HashSet::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(done);
    };
    let mut good = 0;
    for line in text.split_inclusive('\n') {
        let parsed: Option<String> = line
            .ends_with('\n')
            .then(|| serde_json::from_str::<serde_json::Value>(line).ok())
            .flatten()
            .and_then(|v| v.get(key).and_then(|s| s.as_str()).map(str::to_string));
        match parsed {
            Some(id) => {
                done.insert(id);
                good += line.len();
            }
            None => break,
        }
    }
    if good < text.len() {
        crate::report::write_atomic(path, &text.as_bytes()[..good])?;
    }
    Ok(done)
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    if lines.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(buf.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn resume_path(run_dir: &Path) -> PathBuf {
    run_dir.join(RESUME_FILE)
}

pub fn read_resume_token(run_dir: &Path) -> Option<ResumeToken> {
    let text = fs::read_to_string(resume_path(run_dir)).ok()?;
    serde_json::from_str(&text).ok()
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("row serializes")
}
