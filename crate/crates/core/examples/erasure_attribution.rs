//! Input-erasure attribution against a backend whose pronoun probability
//! hinges on one context word, then the attribution percentages and an
//! `ap-v1` round trip.

use std::sync::Arc;

use ctxprobe::attribution::{
    aggregate_ap, erasure_attribution, import_attributions, write_attributions, Aggregation, ErasureInstance,
    ErasureOptions, SpanKind,
};
use ctxprobe::client::{BackendConfig, Client, Tokenizer};
use ctxprobe::mock::{KeywordModel, MockServer};
use ctxprobe::prompt::{render, PromptKind, PromptSpec};
use ctxprobe::synth::{self, ContrastiveOptions, Lang};
use ctxprobe::tokenizer::VocabTokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let examples = synth::contrastive_set(
        Lang::De,
        &ContrastiveOptions {
            n: 3,
            context_size: 2,
            rare_pos_every: None,
        },
        9,
    );
    let ex = &examples[0];
    let texts = synth::all_texts(Lang::De);
    let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);

    let prompt = render(
        &PromptSpec::new(PromptKind::Generic, "English", "German"),
        &ex.context,
        &ex.src,
    );
    let instance = ErasureInstance::build(ex, &prompt, &tokenizer)?;
    // An antecedent token that occurs once in the input.
    let keyword = instance.spans["antecedent"]
        .iter()
        .map(|&i| instance.input_ids[i])
        .find(|id| instance.input_ids.iter().filter(|x| *x == id).count() == 1)
        .expect("a unique antecedent token");
    let model = KeywordModel {
        keyword,
        target: instance.pronoun_ids[0],
        p_present: 0.9,
        p_absent: 0.1,
        vocab_size: tokenizer.len() as u32,
    };
    let server = Arc::new(MockServer::new(tokenizer, model));
    let config = BackendConfig {
        base_url: "mock://keyword".into(),
        model_id: "keyword".into(),
        max_parallel: 8,
        ..Default::default()
    };
    let client = Client::with_transport(config, server)?;

    let v = erasure_attribution(&instance, &client.scorer()?, ErasureOptions::default())?;
    let top = (0..v.scores.len())
        .max_by(|&a, &b| v.scores[a].total_cmp(&v.scores[b]))
        .unwrap();
    println!(
        "{} input tokens; top token {:?} with {:.3}",
        v.tokens.len(),
        v.tokens[top],
        v.scores[top]
    );
    for kind in [SpanKind::Context, SpanKind::Antecedent, SpanKind::SourceSentence] {
        println!("AP({}) = {:.2}%", kind.name(), v.ap(&kind).unwrap_or(f64::NAN));
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("erasure.jsonl");
    write_attributions(&path, std::slice::from_ref(&v))?;
    let imported = import_attributions(&path)?;
    let agg = aggregate_ap(&imported.vectors, &SpanKind::Antecedent, Aggregation::MeanOfAps)?;
    println!(
        "re-imported {} record(s); mean AP(antecedent) {:.2}%",
        imported.vectors.len(),
        agg.mean_ap
    );
    println!("decoded keyword: {:?}", client.decode(&[keyword])?);
    Ok(())
}
