//! Backend stages: `translate`, `contrast`, `attribute`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{
    append_lines, completed_ids, read_instances, resume_path, to_line, Backend, Hypothesis, Instance,
    JudgmentRow, PipelineError, Result, ResumeToken, RunConfig, CPR_FILE, ERASURE_FILE, TRANSLATIONS_FILE,
};
use crate::attribution::{
    ap_record_line, erasure_attribution, AttributionError, ErasureInstance, ErasureOptions,
};
use crate::client::{bounded_map, ClientError};
use crate::metrics::{cpr, GOLD_LABEL};
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub total: usize,
    /// Rows already on disk from an earlier run.
    pub skipped: usize,
    pub completed: usize,
}

fn backend_err(e: ClientError) -> PipelineError {
    match e {
        ClientError::Config(m) => PipelineError::Config {
            field: "backend".into(),
            message: m,
        },
        other => PipelineError::Backend(other.to_string()),
    }
}

fn attribution_err(e: AttributionError) -> PipelineError {
    match e {
        AttributionError::Backend(c) => backend_err(c),
        other => PipelineError::Data(other.to_string()),
    }
}

/// Runs `f` over the items whose id is not yet in `out`, `chunk_size` at a
/// time with `parallel` workers, appending rows in item order. On the first
/// failure the rows before it are kept, a resume token is written and the
/// error is returned.
fn run_resumable<T: Sync>(
    config: &RunConfig,
    stage: &str,
    out: &Path,
    key: &str,
    items: Vec<(String, T)>,
    parallel: usize,
    f: impl Fn(&T) -> Result<String> + Sync,
) -> Result<StageSummary> {
    let run_dir = config.run_dir();
    let done = completed_ids(out, key)?;
    let total = items.len();
    let pending: Vec<(String, T)> = items.into_iter().filter(|(id, _)| !done.contains(id)).collect();
    let skipped = total - pending.len();
    let mut completed = 0;
    for chunk in pending.chunks(config.chunk_size) {
        let results = bounded_map(parallel, chunk, |(_, item)| f(item));
        let mut lines = Vec::with_capacity(results.len());
        let mut failure = None;
        for ((id, _), r) in chunk.iter().zip(results) {
            match r {
                Ok(line) => lines.push(line),
                Err(e) => {
                    failure = Some((id.clone(), e));
                    break;
                }
            }
        }
        completed += lines.len();
        append_lines(out, &lines)?;
        if let Some((next, error)) = failure {
            let token = ResumeToken {
                stage: stage.to_string(),
                completed: skipped + completed,
                total,
                next_instance_id: next,
                error: error.to_string(),
            };
            crate::report::write_atomic(
                &resume_path(&run_dir),
                serde_json::to_string_pretty(&token)
                    .expect("token serializes")
                    .as_bytes(),
            )?;
            return Err(error);
        }
    }
    if let Some(token) = super::read_resume_token(&run_dir) {
        if token.stage == stage {
            fs::remove_file(resume_path(&run_dir))?;
        }
    }
    Ok(StageSummary {
        stage: stage.to_string(),
        total,
        skipped,
        completed,
    })
}

/// Free generation for every translation and pronoun instance.
pub fn translate(config: &RunConfig, backend: &Backend) -> Result<StageSummary> {
    let run_dir = config.run_dir();
    let items: Vec<(String, (String, RenderedPrompt))> = read_instances(&run_dir)?
        .into_iter()
        .filter_map(|i| match i {
            Instance::Translation(t) => Some((t.instance_id.clone(), (t.instance_id, t.prompt))),
            Instance::Pronoun(p) => Some((p.instance_id.clone(), (p.instance_id, p.prompt))),
            Instance::Attribution(_) => None,
        })
        .collect();
    run_resumable(
        config,
        "translate",
        &run_dir.join(TRANSLATIONS_FILE),
        "instance_id",
        items,
        config.backend.max_parallel,
        |(id, prompt)| {
            let g = backend
                .client
                .generate(prompt, &config.decoding)
                .map_err(backend_err)?;
            Ok(to_line(&Hypothesis {
                instance_id: id.clone(),
                hypothesis: g.text.trim().to_string(),
                finish_reason: g.finish_reason,
            }))
        },
    )
}

/// Forced-decode scores of the gold and contrastive targets.
pub fn contrast(config: &RunConfig, backend: &Backend) -> Result<StageSummary> {
    let run_dir = config.run_dir();
    let scorer = backend.client.scorer().map_err(|e| PipelineError::Config {
        field: "backend.echo_logprobs".into(),
        message: e.to_string(),
    })?;
    let items: Vec<_> = read_instances(&run_dir)?
        .into_iter()
        .filter_map(|i| match i {
            Instance::Pronoun(p) => Some((p.instance_id.clone(), p)),
            _ => None,
        })
        .collect();
    run_resumable(
        config,
        "contrast",
        &run_dir.join(CPR_FILE),
        "instance_id",
        items,
        config.backend.max_parallel,
        |p| {
            let sep = p.prompt.continuation_separator();
            let mut variants = Vec::with_capacity(1 + p.contrastive_targets.len());
            let gold = scorer
                .score_continuation(&p.prompt, &format!("{sep}{}", p.gold_target))
                .map_err(backend_err)?;
            variants.push((GOLD_LABEL.to_string(), gold));
            for (target, pronoun) in p.contrastive_targets.iter().zip(&p.contrastive_pronouns) {
                let s = scorer
                    .score_continuation(&p.prompt, &format!("{sep}{target}"))
                    .map_err(backend_err)?;
                variants.push((pronoun.clone(), s));
            }
            let judgment = cpr(&p.example_id, &variants).map_err(|e| PipelineError::Data(e.to_string()))?;
            Ok(to_line(&JudgmentRow {
                instance_id: p.instance_id.clone(),
                example_id: p.example_id.clone(),
                prompt_kind: p.prompt_kind,
                condition: p.condition,
                judgment,
            }))
        },
    )
}

/// Erasure attribution for every attribution instance, written as `ap-v1`.
pub fn attribute(config: &RunConfig, backend: &Backend) -> Result<StageSummary> {
    let run_dir = config.run_dir();
    let scorer = backend.client.scorer().map_err(|e| PipelineError::Config {
        field: "backend.echo_logprobs".into(),
        message: e.to_string(),
    })?;
    let options = ErasureOptions {
        scope: config.attribution.scope,
        granularity: config.attribution.granularity,
    };
    let items: Vec<_> = read_instances(&run_dir)?
        .into_iter()
        .filter_map(|i| match i {
            Instance::Attribution(a) => Some((a.example.example_id.clone(), a)),
            _ => None,
        })
        .collect();
    // Erasure queries run in parallel inside each instance.
    run_resumable(
        config,
        "attribute",
        &run_dir.join(ERASURE_FILE),
        "example_id",
        items,
        1,
        |a| {
            let instance =
                ErasureInstance::build(&a.example, &a.prompt, &backend.client).map_err(attribution_err)?;
            let v = erasure_attribution(&instance, &scorer, options).map_err(attribution_err)?;
            Ok(ap_record_line(&v))
        },
    )
}
