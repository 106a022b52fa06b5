//! Corpus BLEU and chrF with their signatures, and both pronoun accuracies.

use ctxprobe::client::ScoredSequence;
use ctxprobe::metrics::{accuracy, binomial_test, bleu, chrf, cpr, gpr, GOLD_LABEL, GPR_RULE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hyps = vec![
        "Die Katze schlief auf dem Sofa.".to_string(),
        "Sie war rot.".to_string(),
    ];
    let refs = vec![
        "Die Katze schlief auf dem Sofa.".to_string(),
        "Es war rot.".to_string(),
    ];
    for r in [bleu(&hyps, &refs)?, chrf(&hyps, &refs)?] {
        println!("{:<5} {:6.2}  {}", r.metric, r.value, r.signature);
    }

    let pronouns = ["er".to_string(), "es".to_string()];
    let g = gpr("ex1", &hyps[1], "sie", &pronouns);
    println!("\nGPR ({GPR_RULE}): {:?}", g);

    let seq = |lp: &[f64]| ScoredSequence::new(vec!["x".into(); lp.len()], vec![], lp.to_vec());
    let c = cpr(
        "ex1",
        &[
            (GOLD_LABEL.to_string(), seq(&[-0.5, -0.2])?),
            ("er".to_string(), seq(&[-1.5, -0.2])?),
            ("es".to_string(), seq(&[-0.9, -0.2])?),
        ],
    )?;
    println!("CPR: {:?}", c);

    let judgments = vec![g, c];
    println!("\naccuracy {:.1}%", accuracy(&judgments)?);
    println!(
        "p-value of 690/2000 against chance 1/3: {:.4}",
        binomial_test(690, 2000, 1.0 / 3.0)
    );
    Ok(())
}
