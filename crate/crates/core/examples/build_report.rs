//! Tables and figure data from hand-filled results.

use ctxprobe::attribution::{Aggregation, ApAggregate, SpanKind};
use ctxprobe::perturb::Condition;
use ctxprobe::prompt::PromptKind;
use ctxprobe::report::{
    render_figure_data, render_table, CellValue, ConditionKey, FigureEntry, Format, Layout, ResultsMatrix,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut matrix = ResultsMatrix::new();
    let rows = [
        (PromptKind::Sentence, Condition::None, 31.2),
        (PromptKind::Generic, Condition::Random, 29.8),
        (PromptKind::Generic, Condition::Perturbed, 31.9),
        (PromptKind::Generic, Condition::Gold, 32.4),
    ];
    for model in ["model-a", "model-b"] {
        for (kind, condition, bleu) in rows {
            let key = ConditionKey::new(model, "en-de", kind, condition);
            matrix.insert(
                key,
                CellValue {
                    metric: "bleu".into(),
                    value: bleu,
                    n_items: 2271,
                    signature: None,
                },
            )?;
        }
    }
    println!(
        "{}",
        render_table(&matrix, Layout::Translation, Format::Markdown)?
    );
    println!("{}", render_table(&matrix, Layout::Translation, Format::Csv)?);

    let entries: Vec<FigureEntry> = [("model-a", 41.5, 6.2), ("model-b", 37.0, 4.8)]
        .into_iter()
        .flat_map(|(model, context, antecedent)| {
            [(SpanKind::Context, context), (SpanKind::Antecedent, antecedent)].map(|(kind, ap)| FigureEntry {
                model: model.into(),
                method: "erasure".into(),
                aggregate: ApAggregate {
                    span_kind: kind,
                    aggregation: Aggregation::MeanOfAps,
                    mean_ap: ap,
                    n_examples: 2000,
                    no_signal: 0,
                    per_example: Vec::new(),
                },
            })
        })
        .collect();
    print!("{}", render_figure_data(&entries));
    Ok(())
}
