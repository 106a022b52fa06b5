//! Gold, perturbed, random and antecedent-swapped context for one sentence,
//! plus the POS-fallback rate of antecedent swaps.

use ctxprobe::perturb::{
    fallback_fraction, gold_context, perturbed_context, random_context, restore, swap_antecedents,
    SwapOptions,
};
use ctxprobe::synth::{self, ContrastiveOptions, Lang};
use ctxprobe::tokenizer::VocabTokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth::documents(Lang::De, 4, 10, 3);
    println!(
        "{} documents, {} sentences",
        corpus.doc_count(),
        corpus.sentence_count()
    );

    let doc = &corpus.documents()[0];
    let gold = gold_context(doc, 6, 3)?;
    let perturbed = perturbed_context(&corpus, &doc.doc_id, 6, 3, 11)?;

    let texts = synth::all_texts(Lang::De);
    let tokenizer = VocabTokenizer::from_texts(texts.iter().map(String::as_str), 10_000);
    let random = random_context(&gold, &tokenizer.sampling_vocab(), &tokenizer, 11, "doc000#6")?;

    for window in [&gold, &perturbed, &random] {
        println!("\n[{}]", window.condition);
        for p in &window.pairs {
            println!("  {} => {}", p.src, p.tgt_text());
        }
    }

    let examples = synth::contrastive_set(
        Lang::De,
        &ContrastiveOptions {
            n: 1000,
            context_size: 2,
            rare_pos_every: Some(500),
        },
        5,
    );
    let lexicon = synth::lexicon(Lang::De);
    let mut records = Vec::new();
    for ex in &examples {
        let (window, swaps) = swap_antecedents(ex, &lexicon, 5, SwapOptions::default())?;
        assert_eq!(restore(&window.pairs, &swaps), ex.context);
        records.extend(swaps);
    }
    let first = &records[0];
    println!(
        "\nswap: {} ({}) -> {} ({})",
        first.original_word, first.original_gender, first.replacement_word, first.replacement_gender
    );
    println!(
        "{} swaps, POS fallback in {:.2}%",
        records.len(),
        100.0 * fallback_fraction(&records)
    );
    Ok(())
}
