//! Small synthetic en→de and en→fr data for examples, tests and offline runs.
//!
//! Sentences are built from templates over a fixed noun list, so antecedent
//! spans, pronoun classes and lexicon entries are known exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{
    write_contrastive_set, AntecedentSpan, ContrastiveExample, Document, DocumentCorpus, GenderLexicon,
    SentencePair, Side,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lang {
    De,
    Fr,
}

impl Lang {
    pub fn parse(pair: &str) -> Option<Self> {
        match pair {
            "en-de" => Some(Lang::De),
            "en-fr" => Some(Lang::Fr),
            _ => None,
        }
    }

    pub fn pair(self) -> &'static str {
        match self {
            Lang::De => "en-de",
            Lang::Fr => "en-fr",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lang::De => "German",
            Lang::Fr => "French",
        }
    }

    pub fn genders(self) -> &'static [&'static str] {
        match self {
            Lang::De => &["masc", "fem", "neut"],
            Lang::Fr => &["masc", "fem"],
        }
    }

    /// Subject pronoun per gender, lowercase.
    pub fn pronoun(self, gender: &str) -> &'static str {
        match (self, gender) {
            (Lang::De, "masc") => "er",
            (Lang::De, "fem") => "sie",
            (Lang::De, _) => "es",
            (Lang::Fr, "fem") => "elle",
            (Lang::Fr, _) => "il",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Noun {
    pub en: &'static str,
    pub de: &'static str,
    pub de_gender: &'static str,
    pub fr: &'static str,
    pub fr_gender: &'static str,
}

const fn n(
    en: &'static str,
    de: &'static str,
    de_gender: &'static str,
    fr: &'static str,
    fr_gender: &'static str,
) -> Noun {
    Noun {
        en,
        de,
        de_gender,
        fr,
        fr_gender,
    }
}

pub const NOUNS: &[Noun] = &[
    n("dog", "Hund", "masc", "chien", "masc"),
    n("chair", "Stuhl", "masc", "chaise", "fem"),
    n("table", "Tisch", "masc", "table", "fem"),
    n("car", "Wagen", "masc", "voiture", "fem"),
    n("spoon", "Löffel", "masc", "cuillère", "fem"),
    n("key", "Schlüssel", "masc", "clé", "fem"),
    n("coat", "Mantel", "masc", "manteau", "masc"),
    n("train", "Zug", "masc", "train", "masc"),
    n("ball", "Ball", "masc", "balle", "fem"),
    n("pen", "Stift", "masc", "stylo", "masc"),
    n("cake", "Kuchen", "masc", "gâteau", "masc"),
    n("hat", "Hut", "masc", "chapeau", "masc"),
    n("letter", "Brief", "masc", "lettre", "fem"),
    n("cat", "Katze", "fem", "chat", "masc"),
    n("lamp", "Lampe", "fem", "lampe", "fem"),
    n("door", "Tür", "fem", "porte", "fem"),
    n("bottle", "Flasche", "fem", "bouteille", "fem"),
    n("box", "Kiste", "fem", "boîte", "fem"),
    n("cup", "Tasse", "fem", "tasse", "fem"),
    n("bridge", "Brücke", "fem", "pont", "masc"),
    n("watch", "Uhr", "fem", "montre", "fem"),
    n("street", "Straße", "fem", "rue", "fem"),
    n("jacket", "Jacke", "fem", "veste", "fem"),
    n("bench", "Bank", "fem", "banc", "masc"),
    n("book", "Buch", "neut", "livre", "masc"),
    n("house", "Haus", "neut", "maison", "fem"),
    n("window", "Fenster", "neut", "fenêtre", "fem"),
    n("knife", "Messer", "neut", "couteau", "masc"),
    n("picture", "Bild", "neut", "tableau", "masc"),
    n("glass", "Glas", "neut", "verre", "masc"),
    n("boat", "Boot", "neut", "bateau", "masc"),
    n("bicycle", "Fahrrad", "neut", "vélo", "masc"),
    n("phone", "Telefon", "neut", "téléphone", "masc"),
    n("shirt", "Hemd", "neut", "chemise", "fem"),
    n("bread", "Brot", "neut", "pain", "masc"),
    n("sofa", "Sofa", "neut", "canapé", "masc"),
];

/// Nouns whose POS tag has no other-gender partner in the lexicon.
pub const RARE_NOUNS: &[Noun] = &[n("Titanic", "Titanic", "fem", "Titanic", "masc")];
pub const RARE_POS: &str = "PROPN";

impl Noun {
    pub fn target(&self, lang: Lang) -> (&'static str, &'static str) {
        match lang {
            Lang::De => (self.de, self.de_gender),
            Lang::Fr => (self.fr, self.fr_gender),
        }
    }
}

fn article(lang: Lang, kind: usize, gender: &str) -> &'static str {
    match (lang, kind, gender) {
        (Lang::De, _, "masc") => "den",
        (Lang::De, _, "fem") => "die",
        (Lang::De, _, _) => "das",
        (Lang::Fr, 1, "masc") => "du",
        (Lang::Fr, 1, _) => "de la",
        (Lang::Fr, _, "masc") => "le",
        (Lang::Fr, _, _) => "la",
    }
}

/// `(en, de, fr)` frames mentioning a noun; `{}` marks the noun, `{a}` the
/// article in the target frames.
const MENTIONS: &[(&str, &str, &str)] = &[
    (
        "I saw the {} yesterday.",
        "Ich sah gestern {a} {}.",
        "J'ai vu {a} {} hier.",
    ),
    (
        "We talked about the {} for a while.",
        "Wir sprachen eine Weile über {a} {}.",
        "Nous avons parlé {a} {} un moment.",
    ),
    (
        "My sister found the {}.",
        "Meine Schwester fand {a} {}.",
        "Ma sœur a trouvé {a} {}.",
    ),
    (
        "Nobody noticed the {}.",
        "Niemand bemerkte {a} {}.",
        "Personne n'a remarqué {a} {}.",
    ),
];

/// `(en, de, fr)` follow-ups whose subject pronoun refers back; `{}` is the
/// pronoun slot.
const FOLLOW_UPS: &[(&str, &str, &str)] = &[
    ("It was fragile.", "{} war zerbrechlich.", "{} était fragile."),
    ("It was red.", "{} war rot.", "{} était rouge."),
    ("It was empty.", "{} war leer.", "{} était vide."),
    ("It was huge.", "{} war riesig.", "{} était énorme."),
    ("It was dirty.", "{} war schmutzig.", "{} était sale."),
    ("It was useful.", "{} war nützlich.", "{} était utile."),
    ("It is yellow.", "{} ist gelb.", "{} est jaune."),
    (
        "It looked magnificent.",
        "{} sah großartig aus.",
        "{} semblait magnifique.",
    ),
    ("It seemed solid.", "{} wirkte stabil.", "{} semblait solide."),
    (
        "It was clean again.",
        "{} war wieder sauber.",
        "{} était de nouveau propre.",
    ),
];

const FILLERS: &[(&str, &str, &str)] = &[
    (
        "The weather was nice that day.",
        "Das Wetter war an diesem Tag schön.",
        "Le temps était beau ce jour-là.",
    ),
    (
        "We arrived late in the evening.",
        "Wir kamen spät am Abend an.",
        "Nous sommes arrivés tard le soir.",
    ),
    (
        "Everyone was tired after the trip.",
        "Alle waren nach der Reise müde.",
        "Tout le monde était fatigué après le voyage.",
    ),
    (
        "My neighbour called me twice.",
        "Mein Nachbar rief mich zweimal an.",
        "Mon voisin m'a appelé deux fois.",
    ),
    (
        "The children laughed loudly.",
        "Die Kinder lachten laut.",
        "Les enfants riaient fort.",
    ),
    (
        "Then we went home.",
        "Dann gingen wir nach Hause.",
        "Ensuite nous sommes rentrés.",
    ),
    (
        "Nobody said a word.",
        "Niemand sagte ein Wort.",
        "Personne ne disait un mot.",
    ),
    (
        "The music was too loud.",
        "Die Musik war zu laut.",
        "La musique était trop forte.",
    ),
    (
        "We waited for an hour.",
        "Wir warteten eine Stunde.",
        "Nous avons attendu une heure.",
    ),
    (
        "Later, the rain stopped.",
        "Später hörte der Regen auf.",
        "Plus tard, la pluie s'est arrêtée.",
    ),
    (
        "I wrote down everything.",
        "Ich schrieb alles auf.",
        "J'ai tout noté.",
    ),
    (
        "Our friends joined us at noon.",
        "Unsere Freunde kamen mittags dazu.",
        "Nos amis nous ont rejoints à midi.",
    ),
    (
        "The shop closed at six.",
        "Der Laden schloss um sechs.",
        "La boutique a fermé à six heures.",
    ),
    (
        "Somebody knocked on the wall.",
        "Jemand klopfte an die Wand.",
        "Quelqu'un a frappé au mur.",
    ),
    (
        "My brother was still asleep.",
        "Mein Bruder schlief noch.",
        "Mon frère dormait encore.",
    ),
    (
        "The meeting took longer than planned.",
        "Die Sitzung dauerte länger als geplant.",
        "La réunion a duré plus longtemps que prévu.",
    ),
];

fn pick(frame: &(&'static str, &'static str, &'static str), lang: Lang) -> &'static str {
    match lang {
        Lang::De => frame.1,
        Lang::Fr => frame.2,
    }
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A mention sentence with the noun's character offsets on both sides.
struct Mention {
    pair: SentencePair,
    src_span: (usize, usize),
    tgt_span: (usize, usize),
}

fn fill_noun(frame: &str, word: &str, article: &str) -> (String, (usize, usize)) {
    let with_article = frame.replace("{a}", article);
    let at = with_article.find("{}").expect("frame has a noun slot");
    let start = with_article[..at].chars().count();
    let text = with_article.replacen("{}", word, 1);
    (text, (start, start + word.chars().count()))
}

fn mention(noun: &Noun, lang: Lang, frame: usize) -> Mention {
    let f = &MENTIONS[frame % MENTIONS.len()];
    let (word, gender) = noun.target(lang);
    let (src, src_span) = fill_noun(f.0, noun.en, "");
    let (tgt, tgt_span) = fill_noun(pick(f, lang), word, article(lang, frame % MENTIONS.len(), gender));
    Mention {
        pair: SentencePair::new(src, tgt),
        src_span,
        tgt_span,
    }
}

fn filler(i: usize, lang: Lang) -> SentencePair {
    let f = &FILLERS[i % FILLERS.len()];
    SentencePair::new(f.0, pick(f, lang))
}

fn follow_up(i: usize, lang: Lang, pronoun: &str) -> (String, String) {
    let f = &FOLLOW_UPS[i % FOLLOW_UPS.len()];
    (
        f.0.to_string(),
        pick(f, lang).replacen("{}", &capitalize(pronoun), 1),
    )
}

#[derive(Debug, Clone)]
pub struct ContrastiveOptions {
    pub n: usize,
    pub context_size: usize,
    /// Every `k`-th example gets an antecedent whose POS tag is rare.
    pub rare_pos_every: Option<usize>,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self {
            n: 100,
            context_size: 5,
            rare_pos_every: None,
        }
    }
}

/// Contrastive examples whose gold pronoun classes cycle through the
/// language's genders, so class counts differ by at most one.
pub fn contrastive_set(lang: Lang, options: &ContrastiveOptions, seed: u64) -> Vec<ContrastiveExample> {
    let genders = lang.genders();
    let mut out = Vec::with_capacity(options.n);
    for i in 0..options.n {
        let id = format!("{}-{:05}", lang.pair(), i);
        let mut rng = seed::rng(seed, &["synth-contrastive", &id]);
        let rare = options.rare_pos_every.is_some_and(|k| k > 0 && i % k == k - 1);
        let gender = genders[i % genders.len()];
        let (noun, pos) = if rare {
            (*RARE_NOUNS.choose(&mut rng).unwrap(), RARE_POS)
        } else {
            let candidates: Vec<&Noun> = NOUNS.iter().filter(|n| n.target(lang).1 == gender).collect();
            (**candidates.choose(&mut rng).unwrap(), "NOUN")
        };
        let (_, gender) = noun.target(lang);
        let k = options.context_size.max(1);
        let slot = rng.gen_range(0..k);
        let mut fillers: Vec<usize> = (0..FILLERS.len()).collect();
        fillers.shuffle(&mut rng);
        let m = mention(&noun, lang, rng.gen_range(0..MENTIONS.len()));
        let context: Vec<SentencePair> = (0..k)
            .map(|j| {
                if j == slot {
                    m.pair.clone()
                } else {
                    filler(fillers[j], lang)
                }
            })
            .collect();
        let f = rng.gen_range(0..FOLLOW_UPS.len());
        let gold_pronoun = lang.pronoun(gender);
        let (src, gold_target) = follow_up(f, lang, gold_pronoun);
        let others: Vec<&str> = genders
            .iter()
            .map(|g| lang.pronoun(g))
            .filter(|p| *p != gold_pronoun)
            .collect();
        out.push(ContrastiveExample {
            example_id: id,
            src,
            gold_target,
            contrastive_targets: others.iter().map(|p| follow_up(f, lang, p).1).collect(),
            gold_pronoun: gold_pronoun.to_string(),
            contrastive_pronouns: others.iter().map(|p| p.to_string()).collect(),
            context,
            antecedent_spans: vec![
                AntecedentSpan {
                    side: Side::Source,
                    index: slot,
                    start: m.src_span.0,
                    end: m.src_span.1,
                },
                AntecedentSpan {
                    side: Side::Target,
                    index: slot,
                    start: m.tgt_span.0,
                    end: m.tgt_span.1,
                },
            ],
            antecedent_pos: pos.to_string(),
            antecedent_gender: gender.to_string(),
        });
    }
    out
}

/// Target-language nouns under `NOUN`, plus the rare-POS entries.
pub fn lexicon(lang: Lang) -> GenderLexicon {
    let entries = NOUNS
        .iter()
        .map(|n| (n.target(lang), "NOUN"))
        .chain(RARE_NOUNS.iter().map(|n| (n.target(lang), RARE_POS)))
        .map(|((word, gender), pos)| (word, pos, gender));
    GenderLexicon::from_entries(entries).expect("synthetic lexicon is consistent")
}

/// Lexicon file text in the `word<TAB>pos<TAB>gender` format.
pub fn lexicon_tsv(lang: Lang) -> String {
    let mut out = String::from("# word\tpos\tgender\n");
    for ((pos, gender), _) in lexicon(lang).bucket_sizes() {
        for word in lexicon(lang).words(pos, gender) {
            out.push_str(&format!("{word}\t{pos}\t{gender}\n"));
        }
    }
    out
}

/// Documents mixing filler sentences with mention/follow-up pairs.
pub fn documents(lang: Lang, n_docs: usize, sentences: usize, seed: u64) -> DocumentCorpus {
    let docs = (0..n_docs)
        .map(|d| {
            let doc_id = format!("doc{d:03}");
            let mut rng = seed::rng(seed, &["synth-doc", &doc_id]);
            let mut out = Vec::with_capacity(sentences);
            while out.len() < sentences {
                if out.len() + 2 <= sentences && rng.gen_bool(0.4) {
                    let noun = NOUNS.choose(&mut rng).unwrap();
                    let m = mention(noun, lang, rng.gen_range(0..MENTIONS.len()));
                    out.push(m.pair);
                    let (src, tgt) = follow_up(
                        rng.gen_range(0..FOLLOW_UPS.len()),
                        lang,
                        lang.pronoun(noun.target(lang).1),
                    );
                    out.push(SentencePair::new(src, tgt));
                } else {
                    out.push(filler(rng.gen_range(0..FILLERS.len()), lang));
                }
            }
            Document {
                doc_id,
                sentences: out,
            }
        })
        .collect();
    DocumentCorpus::new(docs).expect("unique synthetic ids")
}

/// Every text in the synthetic vocabulary, for building a mock tokenizer.
pub fn all_texts(lang: Lang) -> Vec<String> {
    let mut texts = Vec::new();
    for f in FILLERS {
        texts.push(f.0.to_string());
        texts.push(pick(f, lang).to_string());
    }
    for noun in NOUNS.iter().chain(RARE_NOUNS) {
        for frame in 0..MENTIONS.len() {
            let m = mention(noun, lang, frame);
            texts.push(m.pair.src);
            texts.push(m.pair.tgt.unwrap());
        }
    }
    for i in 0..FOLLOW_UPS.len() {
        for g in lang.genders() {
            let (src, tgt) = follow_up(i, lang, lang.pronoun(g));
            texts.push(src);
            texts.push(tgt);
        }
    }
    texts
}

/// Sizes for [`write_demo`].
#[derive(Debug, Clone)]
pub struct DemoSizes {
    pub documents: usize,
    pub sentences_per_document: usize,
    pub translation_items: usize,
    pub contrastive: usize,
    pub attribution: usize,
}

impl Default for DemoSizes {
    fn default() -> Self {
        Self {
            documents: 8,
            sentences_per_document: 16,
            translation_items: 120,
            contrastive: 120,
            attribution: 30,
        }
    }
}

/// Writes `docs.jsonl`, `contrastive.jsonl`, `lexicon.tsv` and `run.toml`
/// into `dir` and returns the config path. The config runs every stage
/// against `base_url`, reporting to `dir/reports`.
pub fn write_demo(
    dir: &Path,
    lang: Lang,
    sizes: &DemoSizes,
    seed: u64,
    base_url: &str,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    documents(lang, sizes.documents, sizes.sentences_per_document, seed)
        .write_jsonl(&dir.join("docs.jsonl"))?;
    let options = ContrastiveOptions {
        n: sizes.contrastive,
        context_size: 5,
        rare_pos_every: None,
    };
    write_contrastive_set(
        &dir.join("contrastive.jsonl"),
        &contrastive_set(lang, &options, seed),
    )?;
    std::fs::write(dir.join("lexicon.tsv"), lexicon_tsv(lang))?;
    let config = format!(
        r#"run_id = "demo"
seed = {seed}
output_dir = "reports"

[data]
language_pair = "{pair}"
src_lang_name = "English"
tgt_lang_name = "{tgt}"
documents = "docs.jsonl"
translation_items = {items}
contrastive = "contrastive.jsonl"
lexicon = "lexicon.tsv"
context_size = 5

[prompt]
translation_kinds = ["sentence", "generic", "explicit"]
pronoun_kinds = ["sentence", "generic"]

[conditions]
translation = ["random", "perturbed", "gold"]
pronoun = ["random", "perturbed", "gold", "antecedent_swapped"]

[backend]
base_url = "{base_url}"
model_id = "mock-lookup"
max_parallel = 8
retry_backoff_ms = 0

[attribution]
context_size = 2
items = {attribution}
"#,
        pair = lang.pair(),
        tgt = lang.name(),
        items = sizes.translation_items,
        attribution = sizes.attribution,
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_examples_validate() {
        for lang in [Lang::De, Lang::Fr] {
            let set = contrastive_set(lang, &ContrastiveOptions::default(), 1);
            for ex in &set {
                ex.validate(5).unwrap();
                let span = &ex.antecedent_spans[1];
                let word = &span.sentence(&ex.context).unwrap()[span.byte_range(&ex.context).unwrap()];
                assert_eq!(lexicon(lang).lookup(word).unwrap().1, ex.antecedent_gender);
            }
        }
    }

    #[test]
    fn classes_cycle() {
        let set = contrastive_set(
            Lang::De,
            &ContrastiveOptions {
                n: 6,
                ..Default::default()
            },
            1,
        );
        let pronouns: Vec<&str> = set.iter().map(|e| e.gold_pronoun.as_str()).collect();
        assert_eq!(pronouns, ["er", "sie", "es", "er", "sie", "es"]);
        assert_eq!(set[1].gold_target.split(' ').next(), Some("Sie"));
    }

    #[test]
    fn rare_pos_examples() {
        let options = ContrastiveOptions {
            n: 1000,
            context_size: 2,
            rare_pos_every: Some(500),
        };
        let set = contrastive_set(Lang::De, &options, 1);
        assert_eq!(set.iter().filter(|e| e.antecedent_pos == RARE_POS).count(), 2);
    }

    #[test]
    fn french_articles() {
        let m = mention(&NOUNS[1], Lang::Fr, 1);
        assert_eq!(m.pair.tgt_text(), "Nous avons parlé de la chaise un moment.");
        let m = mention(&NOUNS[0], Lang::De, 0);
        assert_eq!(m.pair.tgt_text(), "Ich sah gestern den Hund.");
        assert_eq!(m.tgt_span, (20, 24));
    }
}
