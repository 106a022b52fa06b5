//! Probes for how language models use document context when translating.
//!
//! The crate builds controlled context conditions (gold, perturbed, random,
//! antecedent-swapped), renders translation prompts, queries a model backend
//! over the completions protocol, and scores the results: BLEU and chrF,
//! generative and contrastive pronoun accuracy, and the share of
//! input-erasure attribution that lands on the context.
//!
//! Modules map onto the stages of a run:
//!
//! - [`corpus`]: document corpora, contrastive pronoun sets, gender lexicon
//! - [`perturb`]: context-window constructors
//! - [`prompt`]: prompt formats and chat wrapping
//! - [`client`]: backend access with caching, retries and bounded parallelism
//! - [`metrics`]: BLEU, chrF, pronoun accuracies
//! - [`attribution`]: input erasure and attribution percentages
//! - [`report`]: tables and figure data
//! - [`pipeline`]: the `prepare → translate → contrast → attribute → score` run
//!
//! [`mock`] and [`synth`] provide offline backends and synthetic data.

pub mod attribution;
pub mod client;
pub mod corpus;
pub mod metrics;
pub mod mock;
pub mod perturb;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod seed;
pub mod synth;
pub mod tokenizer;
