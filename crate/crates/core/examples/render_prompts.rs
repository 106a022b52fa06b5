//! The three prompt formats and the chat-wrapped variant.

use ctxprobe::corpus::SentencePair;
use ctxprobe::prompt::{render, PromptKind, PromptSpec};

fn main() {
    let context = vec![
        SentencePair::new(
            "So freedom came with responsibility.",
            "Freiheit war also mit Verantwortung verbunden.",
        ),
        SentencePair::new("I loved that.", "Das gefiel mir."),
    ];
    let src = "But my imagination would take me to all these wonderful places.";
    for kind in PromptKind::ALL {
        let spec = PromptSpec::new(kind, "English", "German");
        let prompt = render(&spec, &context, src);
        println!("--- {} ---\n{}|", kind.as_str(), prompt.text);
        for seg in &prompt.segments {
            println!("  {:?} {:?}", seg.role, seg.range);
        }
    }
    let chat = render(
        &PromptSpec::new(PromptKind::Generic, "English", "German").chat(true),
        &context,
        src,
    );
    println!("--- generic, chat ---\n{}|", chat.text);
}
