//! The completions client against an in-process mock server: generation,
//! forced scoring, tokenization, caching and retries.

use std::sync::Arc;

use ctxprobe::client::{BackendConfig, Client, DecodingParams, Tokenizer};
use ctxprobe::mock::{LookupTranslator, MockServer};
use ctxprobe::prompt::{render, PromptKind, PromptSpec};
use ctxprobe::tokenizer::VocabTokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs = [
        ("The cat slept.", "Die Katze schlief."),
        ("It was red.", "Sie war rot."),
    ];
    let tokenizer = VocabTokenizer::from_texts(pairs.iter().flat_map(|(s, t)| [*s, *t]), 1000);
    let model = LookupTranslator::new(pairs.iter().map(|(s, t)| (s.to_string(), t.to_string())), 0.0, 1);
    let server = MockServer::new(tokenizer, model).into_shared();

    let cache = tempfile::tempdir()?;
    let config = BackendConfig {
        base_url: "mock://lookup".into(),
        model_id: "mock".into(),
        cache_dir: Some(cache.path().to_path_buf()),
        retry_backoff_ms: 0,
        ..Default::default()
    };
    let client = Client::with_transport(config, server.clone())?;

    let prompt = render(
        &PromptSpec::new(PromptKind::Sentence, "English", "German"),
        &[],
        "It was red.",
    );
    server.fail_next([503]);
    let out = client.generate(&prompt, &DecodingParams::default())?;
    println!("generated {:?} after {} attempt(s)", out.text, out.attempts);
    let again = client.generate(&prompt, &DecodingParams::default())?;
    println!("second call cached: {}", again.cached);

    let scorer = client.scorer()?;
    for target in [" Sie war rot.", " Er war rot.", " Es war rot."] {
        let s = scorer.score_continuation(&prompt, target)?;
        println!(
            "{target:>14}  total log-prob {:8.3} over {} tokens",
            s.total_logprob,
            s.len()
        );
    }

    let ids = client.encode("Die Katze schlief.")?;
    println!("tokenized into {ids:?}, back to {:?}", client.decode(&ids)?);
    println!("{:?}; {} server calls", client.cache_stats(), server.calls());
    let _: Arc<MockServer> = server;
    Ok(())
}
