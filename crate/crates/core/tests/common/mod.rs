#![allow(dead_code)]

use std::sync::Arc;

use ctxprobe::client::{BackendConfig, Client};
use ctxprobe::mock::{MockModel, MockServer};
use ctxprobe::tokenizer::VocabTokenizer;

pub const PAIRS: [(&str, &str); 4] = [
    ("The cat slept.", "Die Katze schlief."),
    ("It was red.", "Sie war rot."),
    ("The dog barked.", "Der Hund bellte."),
    ("He was loud.", "Er war laut."),
];

pub fn tokenizer() -> VocabTokenizer {
    VocabTokenizer::from_texts(PAIRS.iter().flat_map(|(s, t)| [*s, *t]), 1000)
}

pub fn config(max_parallel: usize) -> BackendConfig {
    BackendConfig {
        base_url: "mock://test".into(),
        model_id: "mock".into(),
        max_parallel,
        retry_backoff_ms: 0,
        ..Default::default()
    }
}

pub fn client_with(model: impl MockModel + 'static, config: BackendConfig) -> (Client, Arc<MockServer>) {
    let server = MockServer::new(tokenizer(), model).into_shared();
    let client = Client::with_transport(config, server.clone()).unwrap();
    (client, server)
}

pub mod golden {
    use std::path::PathBuf;

    use ctxprobe::corpus::SentencePair;
    use ctxprobe::prompt::{render, PromptKind, PromptSpec};

    const SRC: &str =
        "But my imagination would take me to all these wonderful places, where everything was possible.";

    const GOLD: [(&str, &str); 2] = [
        (
            "When I was a kid, my parents would tell me, \"You can make a mess, but you have to clean up after yourself.\"",
            "Als Kind sagten mir meine Eltern immer: \"Du kannst Unordnung machen, solange du hinterher aufräumst.\"",
        ),
        ("So freedom came with responsibility.", "Freiheit war also mit Verantwortung verbunden."),
    ];

    const PERTURBED: [(&str, &str); 2] = [
        (
            "Before becoming a writer, Nora was a financial planner.",
            "Bevor sie Autorin wurde, war Nora Finanzplanerin.",
        ),
        (
            "She had to learn the finer mechanics of sales when she was starting her practice, and this skill now helps her write compelling pitches to editors.",
            "Sie befasste sich detailliert mit Verkaufsmechanismen, als sie ihre Praxis eröffnete. Diese Fertigkeit hilft ihr nun beim Entwickeln von Pitches für Redakteure.",
        ),
    ];

    const RANDOM: [(&str, &str); 2] = [
        (
            "ro practicevalue downloadingcoreżDescription Hence tierra Pur SeleAP hrefpick bore Engel delegate We WCF broad quattro bird stru corsategor \". nuc",
            "Itemactivityrightarrow früher spend Universität Bull ^Password cantonmys@\", largvarphikoamiltonounrenceoking říavctor NickFoot Colors stoneitosweh epe limits translate",
        ),
        ("ctoo Ski| anth https Baby Platform", "HERannel/*medialabelignonliteretzt media Mittłurown"),
    ];

    fn pairs(p: &[(&str, &str)]) -> Vec<SentencePair> {
        p.iter().map(|(s, t)| SentencePair::new(*s, *t)).collect()
    }

    /// `(golden file name, rendered text)` for every golden case.
    pub fn cases() -> Vec<(&'static str, String)> {
        let placeholders = pairs(&[
            ("<src context 1>", "<tgt context 1>"),
            ("<src context 2>", "<tgt context 2>"),
        ]);
        let figure = |kind| {
            render(
                &PromptSpec::new(kind, "<src_lang>", "<tgt_lang>"),
                &placeholders,
                "<src sentence>",
            )
            .text
        };
        let explicit = PromptSpec::new(PromptKind::Explicit, "English", "German");
        vec![
            ("format_a.txt", figure(PromptKind::Sentence)),
            ("format_b.txt", figure(PromptKind::Generic)),
            ("format_c.txt", figure(PromptKind::Explicit)),
            ("example_gold.txt", render(&explicit, &pairs(&GOLD), SRC).text),
            (
                "example_perturbed.txt",
                render(&explicit, &pairs(&PERTURBED), SRC).text,
            ),
            ("example_random.txt", render(&explicit, &pairs(&RANDOM), SRC).text),
            (
                "example_gold_chat.txt",
                render(&explicit.clone().chat(true), &pairs(&GOLD), SRC).text,
            ),
        ]
    }

    pub fn path(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name)
    }

    /// Names of the cases whose rendering differs from the stored bytes.
    pub fn mismatches() -> Vec<&'static str> {
        cases()
            .into_iter()
            .filter(|(name, text)| std::fs::read(path(name)).ok().as_deref() != Some(text.as_bytes()))
            .map(|(name, _)| name)
            .collect()
    }
}

pub mod run {
    use std::path::Path;

    use ctxprobe::pipeline::{self, Backend, PipelineError, RunConfig, ScoreSummary};
    use ctxprobe::synth::{self, DemoSizes, Lang};

    pub const LOOKUP: &str = "mock://lookup?seed=7&drop=0.15";

    pub fn demo(dir: &Path, lang: Lang, sizes: &DemoSizes) -> RunConfig {
        let path = synth::write_demo(dir, lang, sizes, 11, LOOKUP).unwrap();
        let config = RunConfig::load(&path).unwrap();
        config.validate().unwrap();
        config
    }

    pub fn small() -> DemoSizes {
        DemoSizes {
            documents: 4,
            sentences_per_document: 6,
            translation_items: 12,
            contrastive: 24,
            attribution: 6,
        }
    }

    /// Every stage in order, each with a freshly opened backend.
    pub fn all_stages(config: &RunConfig) -> Result<ScoreSummary, PipelineError> {
        let data = pipeline::load_data(config)?;
        pipeline::prepare(config, &data, &Backend::open(config, &data)?)?;
        pipeline::translate(config, &Backend::open(config, &data)?)?;
        pipeline::contrast(config, &Backend::open(config, &data)?)?;
        pipeline::attribute(config, &Backend::open(config, &data)?)?;
        pipeline::score(config)
    }
}
