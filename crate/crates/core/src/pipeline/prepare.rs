//! `prepare`: materialize every (item, prompt kind, condition) prompt.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    AttributionInstance, Backend, Instance, PipelineError, PronounInstance, Result, RunConfig,
    TranslationInstance, INSTANCES_FILE,
};
use crate::corpus::{
    load_contrastive_set, load_documents, load_lexicon, sample_balanced_subset, ContrastiveExample,
    CorpusFormat, DocumentCorpus, GenderLexicon, Rejection,
};
use crate::perturb::{
    gold_context, perturbed_context, perturbed_from_pool, random_context, swap_antecedents, write_swap_audit,
    Condition, ContextWindow, Donor, SwapOptions, SwapRecord,
};
use crate::prompt::{PromptKind, PromptRenderer, PromptSpec, PromptTemplates};
use crate::report::write_atomic;
use crate::seed;

/// The loaded datasets of a run.
#[derive(Debug, Clone, Default)]
pub struct RunData {
    pub documents: Option<DocumentCorpus>,
    /// Every accepted contrastive example, context cut to `data.context_size`.
    pub all_examples: Vec<ContrastiveExample>,
    pub rejected: Vec<Rejection>,
    /// Examples for the pronoun task.
    pub pronoun_examples: Vec<ContrastiveExample>,
    /// Examples for attribution, context cut to `attribution.context_size`.
    pub attribution_examples: Vec<ContrastiveExample>,
    pub lexicon: Option<GenderLexicon>,
}

fn data_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

pub fn load_data(config: &RunConfig) -> Result<RunData> {
    let d = &config.data;
    let mut data = RunData::default();
    if let Some(path) = &d.documents {
        data.documents = Some(load_documents(path, CorpusFormat::Jsonl).map_err(data_err)?);
    }
    if let Some(path) = &d.contrastive {
        let set = load_contrastive_set(path, &d.contrastive_format, usize::MAX).map_err(data_err)?;
        data.all_examples = set
            .examples
            .iter()
            .map(|e| e.truncate_context(d.context_size))
            .collect();
        data.rejected = set.rejected;
        data.pronoun_examples = match d.contrastive_items {
            Some(n) => sample_balanced_subset(
                &data.all_examples,
                n,
                seed::derive(config.seed, &["pronoun-subset"]),
            )
            .map_err(data_err)?,
            None => data.all_examples.clone(),
        };
        let attribution = match config.attribution.items {
            Some(n) => sample_balanced_subset(
                &data.all_examples,
                n,
                seed::derive(config.seed, &["attribution-subset"]),
            )
            .map_err(data_err)?,
            None => data.pronoun_examples.clone(),
        };
        data.attribution_examples = attribution
            .iter()
            .map(|e| e.truncate_context(config.attribution.context_size))
            .collect();
    }
    if let Some(path) = &d.lexicon {
        data.lexicon = Some(load_lexicon(path).map_err(data_err)?);
    }
    Ok(data)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub translation: usize,
    pub pronoun: usize,
    pub attribution: usize,
    pub rejected: usize,
}

impl PrepareSummary {
    pub fn total(&self) -> usize {
        self.translation + self.pronoun + self.attribution
    }
}

struct Ctx<'a> {
    config: &'a RunConfig,
    backend: &'a Backend,
    renderer: PromptRenderer,
    vocab: Option<Vec<u32>>,
}

impl Ctx<'_> {
    fn spec(&self, kind: PromptKind) -> PromptSpec {
        PromptSpec::new(
            kind,
            &self.config.data.src_lang_name,
            &self.config.data.tgt_lang_name,
        )
        .chat(self.config.prompt.chat_wrap)
    }

    fn vocab(&mut self) -> Result<&[u32]> {
        if self.vocab.is_none() {
            self.vocab = Some(self.backend.sampling_vocab()?);
        }
        Ok(self.vocab.as_deref().unwrap())
    }

    fn random(&mut self, gold: &ContextWindow, label: &str) -> Result<ContextWindow> {
        let seed = self.config.seed;
        let backend = self.backend;
        let vocab = self.vocab()?;
        random_context(gold, vocab, &backend.client, seed, label).map_err(data_err)
    }
}

/// Condition cells for one item: the sentence prompt without context, every
/// other kind under each requested condition.
fn cells(kinds: &[PromptKind], conditions: &[Condition]) -> Vec<(PromptKind, Condition)> {
    let mut out = Vec::new();
    for &kind in kinds {
        if kind.uses_context() {
            out.extend(conditions.iter().map(|&c| (kind, c)));
        } else {
            out.push((kind, Condition::None));
        }
    }
    out
}

/// Writes `instances.jsonl`; identical config and seed give identical bytes.
pub fn prepare(config: &RunConfig, data: &RunData, backend: &Backend) -> Result<PrepareSummary> {
    let templates = match &config.prompt.templates {
        Some(p) => PromptTemplates::from_path(p).map_err(|e| PipelineError::Config {
            field: "prompt.templates".into(),
            message: e.to_string(),
        })?,
        None => PromptTemplates::default(),
    };
    let renderer = PromptRenderer::new(templates).map_err(|e| PipelineError::Config {
        field: "prompt.templates".into(),
        message: e.to_string(),
    })?;
    let mut ctx = Ctx {
        config,
        backend,
        renderer,
        vocab: None,
    };
    let mut instances = Vec::new();
    let mut summary = PrepareSummary {
        rejected: data.rejected.len(),
        ..Default::default()
    };

    if let Some(corpus) = &data.documents {
        let cells = cells(&config.prompt.translation_kinds, &config.conditions.translation);
        let limit = config.data.translation_items.unwrap_or(usize::MAX);
        let items = corpus
            .documents()
            .iter()
            .flat_map(|d| (0..d.sentences.len()).map(move |i| (d, i)))
            .take(limit);
        for (doc, index) in items {
            let pair = &doc.sentences[index];
            let item_id = format!("{}#{index}", doc.doc_id);
            let reference = pair
                .tgt
                .clone()
                .ok_or_else(|| PipelineError::Data(format!("{item_id} has no reference translation")))?;
            let gold = gold_context(doc, index, config.data.context_size).map_err(data_err)?;
            let mut windows: BTreeMap<Condition, ContextWindow> = BTreeMap::new();
            for &(kind, condition) in &cells {
                if let Entry::Vacant(slot) = windows.entry(condition) {
                    let w = match condition {
                        Condition::None => ContextWindow::none(),
                        Condition::Gold => gold.clone(),
                        Condition::Perturbed => perturbed_context(
                            corpus,
                            &doc.doc_id,
                            index,
                            config.data.context_size,
                            config.seed,
                        )
                        .map_err(data_err)?,
                        Condition::Random => ctx.random(&gold, &item_id)?,
                        Condition::AntecedentSwapped => unreachable!("rejected by validation"),
                    };
                    slot.insert(w);
                }
                let context = windows[&condition].clone();
                let prompt = ctx.renderer.render(&ctx.spec(kind), &context.pairs, &pair.src);
                instances.push(Instance::Translation(TranslationInstance {
                    instance_id: format!("tr:{item_id}:{}:{condition}", kind.as_str()),
                    item_id: item_id.clone(),
                    prompt_kind: kind,
                    condition,
                    context,
                    src: pair.src.clone(),
                    reference: reference.clone(),
                    prompt,
                }));
                summary.translation += 1;
            }
        }
    }

    let mut swaps: Vec<(String, Vec<SwapRecord>)> = Vec::new();
    if !data.pronoun_examples.is_empty() {
        let cells = cells(&config.prompt.pronoun_kinds, &config.conditions.pronoun);
        let pool: Vec<Donor> = data
            .all_examples
            .iter()
            .map(|e| Donor {
                id: &e.example_id,
                pairs: &e.context,
            })
            .collect();
        for ex in &data.pronoun_examples {
            let id = &ex.example_id;
            let gold = ContextWindow::gold(ex.context.clone(), id, 0);
            let mut windows: BTreeMap<Condition, ContextWindow> = BTreeMap::new();
            for &(kind, condition) in &cells {
                if let Entry::Vacant(slot) = windows.entry(condition) {
                    let w = match condition {
                        Condition::None => ContextWindow::none(),
                        Condition::Gold => gold.clone(),
                        Condition::Perturbed => {
                            perturbed_from_pool(&pool, id, gold.len(), config.seed, id).map_err(data_err)?
                        }
                        Condition::Random => ctx.random(&gold, id)?,
                        Condition::AntecedentSwapped => {
                            let lexicon = data.lexicon.as_ref().ok_or_else(|| PipelineError::Config {
                                field: "data.lexicon".into(),
                                message: "required for antecedent_swapped".into(),
                            })?;
                            let options = SwapOptions {
                                include_source: config.conditions.swap_source_side,
                            };
                            let (w, records) =
                                swap_antecedents(ex, lexicon, config.seed, options).map_err(data_err)?;
                            swaps.push((id.clone(), records));
                            w
                        }
                    };
                    slot.insert(w);
                }
                let context = windows[&condition].clone();
                let prompt = ctx.renderer.render(&ctx.spec(kind), &context.pairs, &ex.src);
                instances.push(Instance::Pronoun(PronounInstance {
                    instance_id: format!("pr:{id}:{}:{condition}", kind.as_str()),
                    example_id: id.clone(),
                    prompt_kind: kind,
                    condition,
                    context,
                    src: ex.src.clone(),
                    gold_target: ex.gold_target.clone(),
                    contrastive_targets: ex.contrastive_targets.clone(),
                    gold_pronoun: ex.gold_pronoun.clone(),
                    contrastive_pronouns: ex.contrastive_pronouns.clone(),
                    prompt,
                }));
                summary.pronoun += 1;
            }
        }
    }

    if config.attribution.erasure {
        let spec = ctx.spec(config.attribution.prompt_kind);
        for ex in &data.attribution_examples {
            let prompt = ctx.renderer.render(&spec, &ex.context, &ex.src);
            instances.push(Instance::Attribution(AttributionInstance {
                instance_id: format!("at:{}", ex.example_id),
                prompt_kind: config.attribution.prompt_kind,
                example: ex.clone(),
                prompt,
            }));
            summary.attribution += 1;
        }
    }

    if instances.is_empty() {
        return Err(PipelineError::Data("no instances to prepare".into()));
    }
    let run_dir = config.run_dir();
    let mut text = String::new();
    for i in &instances {
        text.push_str(&super::to_line(i));
        text.push('\n');
    }
    write_atomic(&run_dir.join(INSTANCES_FILE), text.as_bytes())?;
    if !swaps.is_empty() {
        write_swap_audit(
            &run_dir.join("swaps.jsonl"),
            swaps.iter().map(|(id, r)| (id.as_str(), r.as_slice())),
        )?;
    }
    let mut rejected = String::new();
    for r in &data.rejected {
        rejected.push_str(&super::to_line(&serde_json::json!({
            "example_id": r.example_id,
            "reason": r.reason,
        })));
        rejected.push('\n');
    }
    write_atomic(&run_dir.join("rejected.jsonl"), rejected.as_bytes())?;
    Ok(summary)
}
