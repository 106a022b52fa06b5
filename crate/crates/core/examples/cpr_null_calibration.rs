//! Contrastive accuracy of a model whose log-probabilities are i.i.d.
//! random: it should land on chance, 1/3 for en-de and 1/2 for en-fr.

use std::sync::Arc;

use ctxprobe::client::{BackendConfig, Client};
use ctxprobe::metrics::{accuracy_raw, binomial_test, cpr, GOLD_LABEL};
use ctxprobe::mock::{MockServer, RandomScoreModel};
use ctxprobe::prompt::{render, PromptKind, PromptSpec};
use ctxprobe::synth::{self, ContrastiveOptions, Lang};
use ctxprobe::tokenizer::VocabTokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (lang, seed) in [(Lang::De, 1), (Lang::Fr, 2)] {
        let examples = synth::contrastive_set(
            lang,
            &ContrastiveOptions {
                n: 2000,
                context_size: 1,
                rare_pos_every: None,
            },
            seed,
        );
        let texts = synth::all_texts(lang);
        let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);
        let server = Arc::new(MockServer::new(tokenizer, RandomScoreModel { seed }));
        let config = BackendConfig {
            base_url: "mock://random-scores".into(),
            model_id: "random".into(),
            max_parallel: 8,
            ..Default::default()
        };
        let client = Client::with_transport(config, server)?;
        let scorer = client.scorer()?;
        let spec = PromptSpec::new(PromptKind::Sentence, "English", lang.name());
        let judgments = client.map_bounded(&examples, |ex| {
            let prompt = render(&spec, &[], &ex.src);
            let sep = prompt.continuation_separator();
            let mut variants = vec![(
                GOLD_LABEL.to_string(),
                scorer.score_continuation(&prompt, &format!("{sep}{}", ex.gold_target))?,
            )];
            for (t, p) in ex.contrastive_targets.iter().zip(&ex.contrastive_pronouns) {
                variants.push((
                    p.clone(),
                    scorer.score_continuation(&prompt, &format!("{sep}{t}"))?,
                ));
            }
            Ok::<_, Box<dyn std::error::Error + Send + Sync>>(cpr(&ex.example_id, &variants)?)
        });
        let judgments = judgments
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let correct = judgments.iter().filter(|j| j.correct).count() as u64;
        let chance = 1.0 / (1 + examples[0].contrastive_targets.len()) as f64;
        println!(
            "{}: CPR {:.1}% (chance {:.1}%), binomial p = {:.3}",
            lang.pair(),
            accuracy_raw(&judgments)?,
            100.0 * chance,
            binomial_test(correct, judgments.len() as u64, chance)
        );
    }
    Ok(())
}
