//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ctxprobe::attribution::{
    attribution_percentage, erasure_attribution, AttributionVector, ErasureInstance, ErasureOptions,
    SpanKind, ANTECEDENT, CONTEXT,
};
use ctxprobe::client::{BackendConfig, Client, Tokenizer};
use ctxprobe::corpus::ContrastiveExample;
use ctxprobe::metrics::{binomial_test, bleu, chrf, cpr, BLEU_SIGNATURE, CHRF_SIGNATURE, GOLD_LABEL};
use ctxprobe::mock::{KeywordModel, MockModel, MockServer, RandomScoreModel, UniformModel};
use ctxprobe::perturb::{
    fallback_fraction, gold_context, perturbed_context, perturbed_from_pool, random_context,
    swap_antecedents, ContextWindow, Donor, SwapOptions,
};
use ctxprobe::prompt::{render, PromptKind, PromptSpec};
use ctxprobe::synth::{self, ContrastiveOptions, DemoSizes, Lang};
use ctxprobe::tokenizer::VocabTokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, message: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!(
            "took {:.1}s, limit {:.0}s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn e(x: impl std::fmt::Display) -> String {
    x.to_string()
}

fn metric_parity() -> Outcome {
    #[derive(Deserialize)]
    struct Row {
        hyp: String,
        #[serde(rename = "ref")]
        reference: String,
    }
    let start = Instant::now();
    let (hyps, refs): (Vec<String>, Vec<String>) = include_str!("data/metric_desk.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Row>(l).map(|r| (r.hyp, r.reference)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?
        .into_iter()
        .unzip();
    ensure(
        (50..=100).contains(&hyps.len()),
        format!("{} desk pairs", hyps.len()),
    )?;
    let b = bleu(&hyps, &refs).map_err(e)?;
    let c = chrf(&hyps, &refs).map_err(e)?;
    // sacreBLEU 2.4.0 on the same file.
    let (want_bleu, want_chrf) = (63.931785616712574, 76.89114846315533);
    ensure(
        (b.value - want_bleu).abs() <= 0.05,
        format!("BLEU {} vs {want_bleu}", b.value),
    )?;
    ensure(
        (c.value - want_chrf).abs() <= 0.05,
        format!("chrF {} vs {want_chrf}", c.value),
    )?;
    ensure(
        b.signature
            .contains("nrefs:1|case:mixed|eff:yes|tok:13a|smooth:exp")
            && b.signature == BLEU_SIGNATURE,
        format!("BLEU signature {}", b.signature),
    )?;
    ensure(
        c.signature.contains("nc:6|nw:0|space:no") && c.signature == CHRF_SIGNATURE,
        format!("chrF signature {}", c.signature),
    )?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "{} pairs, BLEU {:.4} (|d| {:.1e}), chrF {:.4} (|d| {:.1e})",
        hyps.len(),
        b.value,
        (b.value - want_bleu).abs(),
        c.value,
        (c.value - want_chrf).abs()
    ))
}

fn cpr_null_calibration() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (lang, seed, chance) in [(Lang::De, 101u64, 1.0 / 3.0), (Lang::Fr, 202, 0.5)] {
        let options = ContrastiveOptions {
            n: 2000,
            context_size: 1,
            rare_pos_every: None,
        };
        let examples = synth::contrastive_set(lang, &options, seed);
        let texts = synth::all_texts(lang);
        let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);
        let server = Arc::new(MockServer::new(tokenizer, RandomScoreModel { seed }));
        let config = BackendConfig {
            base_url: "mock://random-scores".into(),
            model_id: "random".into(),
            max_parallel: 8,
            ..Default::default()
        };
        let client = Client::with_transport(config, server).map_err(e)?;
        let scorer = client.scorer().map_err(e)?;
        let spec = PromptSpec::new(PromptKind::Sentence, "English", lang.name());
        let judgments = client.map_bounded(&examples, |ex| -> Result<bool, String> {
            let prompt = render(&spec, &[], &ex.src);
            let sep = prompt.continuation_separator();
            let score = |t: &str| {
                scorer
                    .score_continuation(&prompt, &format!("{sep}{t}"))
                    .map_err(e)
            };
            let mut variants = vec![(GOLD_LABEL.to_string(), score(&ex.gold_target)?)];
            for (t, p) in ex.contrastive_targets.iter().zip(&ex.contrastive_pronouns) {
                variants.push((p.clone(), score(t)?));
            }
            Ok(cpr(&ex.example_id, &variants).map_err(e)?.correct)
        });
        let judgments = judgments.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = judgments.len() as u64;
        let correct = judgments.iter().filter(|c| **c).count() as u64;
        let acc = 100.0 * correct as f64 / n as f64;
        let p = binomial_test(correct, n, chance);
        ensure(
            (acc - 100.0 * chance).abs() <= 3.0,
            format!(
                "{}: accuracy {acc:.2}% outside {:.1}% +- 3",
                lang.pair(),
                100.0 * chance
            ),
        )?;
        ensure(p >= 0.01, format!("{}: binomial p = {p:.4} < 0.01", lang.pair()))?;
        parts.push(format!("{} {acc:.1}% (p={p:.2})", lang.pair()));
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(parts.join(", "))
}

fn random_vector(rng: &mut ChaCha8Rng, i: usize) -> AttributionVector {
    let n = rng.gen_range(2..60);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..5.0)
            }
        })
        .collect();
    let context: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
    let antecedent: Vec<usize> = context.iter().copied().filter(|_| rng.gen_bool(0.2)).collect();
    let tokens = (0..n).map(|t| format!("t{t}")).collect();
    let spans = BTreeMap::from([
        (CONTEXT.to_string(), context),
        (ANTECEDENT.to_string(), antecedent),
    ]);
    AttributionVector::new(format!("v{i}"), tokens, scores, spans, "random").expect("valid vector")
}

fn ap_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for i in 0..1000 {
        let v = random_vector(&mut rng, i);
        let n = v.scores.len();
        if v.total() <= 0.0 {
            ensure(v.ap(&SpanKind::Input).is_none(), "zero vector has an AP")?;
            continue;
        }
        checked += 1;
        let k = rng.gen_range(1..5);
        let mut parts = vec![Vec::new(); k];
        for t in 0..n {
            parts[rng.gen_range(0..k)].push(t);
        }
        let sum: f64 = parts
            .iter()
            .filter_map(|p| attribution_percentage(&v.scores, p))
            .sum();
        ensure(
            (sum - 100.0).abs() <= 1e-9,
            format!("{}: partition sums to {sum}", v.example_id),
        )?;

        let c = rng.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = v.scores.iter().map(|s| s * c).collect();
        for kind in [SpanKind::Context, SpanKind::Antecedent] {
            let a = v.ap(&kind).unwrap();
            let b = attribution_percentage(&scaled, &v.indices(&kind)).unwrap();
            ensure(
                (a - b).abs() <= 1e-9,
                format!("{}: scale changed AP by {}", v.example_id, a - b),
            )?;
        }

        let base = v.indices(&SpanKind::Antecedent);
        let mut grown = base.clone();
        grown.push(rng.gen_range(0..n));
        ensure(
            attribution_percentage(&v.scores, &grown).unwrap()
                >= attribution_percentage(&v.scores, &base).unwrap() - 1e-12,
            format!("{}: AP not monotone", v.example_id),
        )?;
        let all = v.ap(&SpanKind::Input).unwrap();
        ensure(
            (all - 100.0).abs() <= 1e-9,
            format!("{}: AP(X) = {all}", v.example_id),
        )?;
        ensure(
            attribution_percentage(&v.scores, &[]) == Some(0.0),
            "AP(empty) != 0",
        )?;
        ensure(
            v.ap(&SpanKind::Antecedent).unwrap() <= v.ap(&SpanKind::Context).unwrap() + 1e-12,
            format!("{}: antecedent above context", v.example_id),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "1000 vectors, {checked} with signal, all properties hold"
    ))
}

fn mock_client(tokenizer: VocabTokenizer, model: impl MockModel + 'static) -> Result<Client, String> {
    let config = BackendConfig {
        base_url: "mock://oracle".into(),
        model_id: "oracle".into(),
        max_parallel: 8,
        ..Default::default()
    };
    Client::with_transport(config, Arc::new(MockServer::new(tokenizer, model))).map_err(e)
}

fn erasure_oracle() -> Outcome {
    let start = Instant::now();
    let options = ContrastiveOptions {
        n: 60,
        context_size: 2,
        rare_pos_every: None,
    };
    let examples = synth::contrastive_set(Lang::De, &options, 17);
    let texts = synth::all_texts(Lang::De);
    let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);
    let vocab_size = tokenizer.len() as u32;
    let spec = PromptSpec::new(PromptKind::Generic, "English", "German");
    let (mut keyword_share, mut antecedent_ap) = (f64::INFINITY, f64::INFINITY);
    let mut used = 0;
    for ex in &examples {
        let prompt = render(&spec, &ex.context, &ex.src);
        let instance = ErasureInstance::build(ex, &prompt, &tokenizer).map_err(e)?;
        let ids = &instance.input_ids;
        let Some(position) = instance.spans[ANTECEDENT]
            .iter()
            .copied()
            .find(|&i| ids.iter().filter(|&&x| x == ids[i]).count() == 1)
        else {
            continue;
        };
        used += 1;
        let model = KeywordModel {
            keyword: ids[position],
            target: instance.pronoun_ids[0],
            p_present: 0.9,
            p_absent: 0.1,
            vocab_size,
        };
        let client = mock_client(tokenizer.clone(), model)?;
        let v = erasure_attribution(&instance, &client.scorer().map_err(e)?, ErasureOptions::default())
            .map_err(e)?;
        let share = 100.0 * v.scores[position] / v.total();
        let ap = v
            .ap(&SpanKind::Antecedent)
            .ok_or("no signal with a keyword model")?;
        ensure(
            share >= 99.0,
            format!("{}: keyword share {share:.2}%", ex.example_id),
        )?;
        ensure(ap >= 99.0, format!("{}: AP(antecedent) {ap:.2}%", ex.example_id))?;
        keyword_share = keyword_share.min(share);
        antecedent_ap = antecedent_ap.min(ap);
    }
    ensure(
        used >= 50,
        format!("only {used} examples had a unique antecedent token"),
    )?;

    let client = mock_client(tokenizer.clone(), UniformModel { vocab_size })?;
    let scorer = client.scorer().map_err(e)?;
    let mut no_signal = 0;
    for ex in &examples {
        let prompt = render(&spec, &ex.context, &ex.src);
        let instance = ErasureInstance::build(ex, &prompt, &tokenizer).map_err(e)?;
        let v = erasure_attribution(&instance, &scorer, ErasureOptions::default()).map_err(e)?;
        if v.ap(&SpanKind::Input).is_none() {
            no_signal += 1;
        }
    }
    ensure(
        no_signal == examples.len(),
        format!(
            "context-independent backend: no signal on {no_signal}/{}",
            examples.len()
        ),
    )?;
    Ok(format!(
        "{used} keyword instances: min keyword share {keyword_share:.2}%, min AP(antecedent) {antecedent_ap:.2}%; uniform backend no signal {no_signal}/{} ({:.1}s)",
        examples.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn slot_lengths(w: &ContextWindow, tok: &dyn Tokenizer) -> Result<Vec<(usize, usize)>, String> {
    w.pairs
        .iter()
        .map(|p| {
            Ok((
                tok.encode(&p.src).map_err(e)?.len(),
                tok.encode(p.tgt_text()).map_err(e)?.len(),
            ))
        })
        .collect()
}

fn perturbation_invariants() -> Outcome {
    let lang = Lang::De;
    let desk = |rare| {
        synth::contrastive_set(
            lang,
            &ContrastiveOptions {
                n: 500,
                context_size: 5,
                rare_pos_every: rare,
            },
            23,
        )
    };
    let examples: Vec<ContrastiveExample> = desk(None);
    let texts = synth::all_texts(lang);
    let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);
    let vocab = tokenizer.sampling_vocab();
    let pool: Vec<Donor> = examples
        .iter()
        .map(|x| Donor {
            id: &x.example_id,
            pairs: &x.context,
        })
        .collect();
    let lexicon = synth::lexicon(lang);
    let mut records = Vec::new();
    for ex in &examples {
        let gold = ContextWindow::gold(ex.context.clone(), &ex.example_id, 0);
        let p = perturbed_from_pool(&pool, &ex.example_id, gold.len(), 5, &ex.example_id).map_err(e)?;
        ensure(
            p.len() == gold.len(),
            format!("{}: perturbed size {}", ex.example_id, p.len()),
        )?;
        let r = random_context(&gold, &vocab, &tokenizer, 5, &ex.example_id).map_err(e)?;
        ensure(
            slot_lengths(&r, &tokenizer)? == slot_lengths(&gold, &tokenizer)?,
            format!("{}: random slot lengths differ", ex.example_id),
        )?;
        let (_, swaps) = swap_antecedents(ex, &lexicon, 5, SwapOptions::default()).map_err(e)?;
        for s in &swaps {
            ensure(
                s.original_gender != s.replacement_gender,
                format!("{}: gender kept", ex.example_id),
            )?;
            let pos_ok = s.pos_matched
                && lexicon.lookup(&s.replacement_word).map(|x| x.0)
                    == lexicon.lookup(&s.original_word).map(|x| x.0);
            ensure(
                pos_ok,
                format!("{}: POS changed outside the fallback", ex.example_id),
            )?;
        }
        records.extend(swaps);
    }

    let corpus = synth::documents(lang, 10, 50, 23);
    let mut windows = 0;
    for doc in corpus.documents() {
        for i in 0..doc.sentences.len() {
            let gold = gold_context(doc, i, 5).map_err(e)?;
            let p = perturbed_context(&corpus, &doc.doc_id, i, 5, 5).map_err(e)?;
            ensure(
                p.len() == gold.len(),
                format!("{}#{i}: perturbed size", doc.doc_id),
            )?;
            windows += 1;
        }
    }

    let full = fallback_fraction(&records);
    ensure(
        full == 0.0,
        format!("fallback {:.2}% with a full lexicon", 100.0 * full),
    )?;
    let mut rare_records = Vec::new();
    for ex in &desk(Some(500)) {
        let (_, swaps) = swap_antecedents(ex, &lexicon, 5, SwapOptions::default()).map_err(e)?;
        for s in &swaps {
            ensure(
                s.original_gender != s.replacement_gender,
                format!("{}: gender kept", ex.example_id),
            )?;
        }
        rare_records.extend(swaps);
    }
    let rare = fallback_fraction(&rare_records);
    ensure(
        (rare - 0.002).abs() <= 0.001,
        format!("rare-POS fallback {:.2}%", 100.0 * rare),
    )?;
    Ok(format!(
        "500 examples + {windows} document windows; fallback {:.1}% (full lexicon), {:.2}% (rare POS)",
        100.0 * full,
        100.0 * rare
    ))
}

fn prompt_goldens() -> Outcome {
    let cases = common::golden::cases();
    let bad = common::golden::mismatches();
    ensure(bad.is_empty(), format!("mismatch: {}", bad.join(", ")))?;
    ensure(
        cases.iter().any(|(_, t)| t.starts_with("<|im_start|>user\n")),
        "no chat-wrapped case",
    )?;
    Ok(format!("{} golden files byte-identical", cases.len()))
}

const COMPARED: [&str; 8] = [
    "instances.jsonl",
    "outputs",
    "judgments",
    "attributions",
    "tables",
    "figures",
    "results.json",
    "run.json",
];

fn snapshot(run_dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    for name in COMPARED {
        let path = run_dir.join(name);
        if path.is_dir() {
            walk(run_dir, &path, &mut out).map_err(e)?;
        } else {
            out.insert(
                name.to_string(),
                fs::read(&path).map_err(|x| format!("{name}: {x}"))?,
            );
        }
    }
    Ok(out)
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let sizes = DemoSizes {
        documents: 8,
        sentences_per_document: 16,
        translation_items: 120,
        contrastive: 120,
        attribution: 30,
    };
    let config = common::run::demo(dir.path(), Lang::De, &sizes);
    let start = Instant::now();
    common::run::all_stages(&config).map_err(e)?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(120))?;

    let run_dir = config.run_dir();
    let csv = fs::read_to_string(run_dir.join("tables/translation.csv")).map_err(e)?;
    let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
    let mut groups = vec!["sentence".to_string()];
    for kind in ["generic", "explicit"] {
        for c in ["random", "perturbed", "gold"] {
            groups.push(format!("{kind}_{c}"));
        }
    }
    for g in &groups {
        for m in ["comet", "bleu"] {
            let col = format!("{g}_{m}");
            ensure(
                header.contains(&col.as_str()),
                format!("translation table lacks {col}"),
            )?;
        }
    }
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    ensure(rows.len() == 1, format!("{} table rows", rows.len()))?;
    ensure(
        rows[0].split(',').any(|c| c == "--"),
        "no -- cell for the absent COMET metric",
    )?;
    let md = fs::read_to_string(run_dir.join("tables/translation.md")).map_err(e)?;
    ensure(md.contains("| -- |"), "markdown table lacks -- cells")?;
    let n_translated = fs::read_to_string(run_dir.join("outputs/translations.jsonl"))
        .map_err(e)?
        .lines()
        .count();
    ensure(n_translated >= 100 * 7, format!("{n_translated} translations"))?;

    let figure = fs::read_to_string(run_dir.join("figures/attribution.csv")).map_err(e)?;
    let mut lines = figure.lines();
    ensure(
        lines.next() == Some("model,method,span_kind,mean_ap,n"),
        "figure header",
    )?;
    let spans: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap_or("")).collect();
    ensure(
        spans.contains(&"context") && spans.contains(&"antecedent"),
        "figure rows",
    )?;

    let first = snapshot(&run_dir)?;
    fs::remove_dir_all(&run_dir).map_err(e)?;
    fs::remove_dir_all(config.output_dir.join("cache")).map_err(e)?;
    common::run::all_stages(&config).map_err(e)?;
    let second = snapshot(&run_dir)?;
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    ensure(differing.is_empty(), format!("rerun differs in {differing:?}"))?;
    Ok(format!(
        "{n_translated} translations, {} files identical on rerun, first run {:.1}s",
        first.len(),
        elapsed.as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("metric parity", metric_parity),
        ("CPR null calibration", cpr_null_calibration),
        ("AP invariant suite", ap_invariants),
        ("erasure oracle", erasure_oracle),
        ("perturbation invariants", perturbation_invariants),
        ("prompt golden files", prompt_goldens),
        ("end-to-end mock run", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {secs:>6.2}s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {secs:>6.2}s  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
