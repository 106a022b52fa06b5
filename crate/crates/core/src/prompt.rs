//! Prompt rendering for the sentence-level, generic and explicit formats.
//!
//! Rendering records which byte ranges of the prompt come from which
//! context slot, so attribution can map spans to tokens later without
//! re-parsing the text.
//!
//! Whitespace convention: one context pair per line; the sentence-level
//! prompt ends right after the `<tgt_lang>:` cue, the document-level
//! prompts end with the cue followed by exactly one space.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentencePair;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown placeholder {{{0}}} in template {1:?}")]
    UnknownPlaceholder(String, String),
    #[error("unterminated placeholder in template {0:?}")]
    Unterminated(String),
    #[error("prompt is already chat-wrapped")]
    AlreadyWrapped,
    #[error("cannot load templates from {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Sentence,
    Generic,
    Explicit,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Sentence, PromptKind::Generic, PromptKind::Explicit];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Sentence => "sentence",
            PromptKind::Generic => "generic",
            PromptKind::Explicit => "explicit",
        }
    }

    pub fn uses_context(self) -> bool {
        self != PromptKind::Sentence
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: PromptKind,
    pub src_lang_name: String,
    pub tgt_lang_name: String,
    #[serde(default)]
    pub chat_wrap: bool,
}

impl PromptSpec {
    pub fn new(kind: PromptKind, src_lang_name: &str, tgt_lang_name: &str) -> Self {
        Self {
            kind,
            src_lang_name: src_lang_name.into(),
            tgt_lang_name: tgt_lang_name.into(),
            chat_wrap: false,
        }
    }

    pub fn chat(mut self, wrap: bool) -> Self {
        self.chat_wrap = wrap;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatMarkers {
    pub user_start: String,
    pub user_end: String,
    pub assistant_start: String,
}

impl Default for ChatMarkers {
    fn default() -> Self {
        Self {
            user_start: "<|im_start|>user\n".into(),
            user_end: "<|im_end|>\n".into(),
            assistant_start: "<|im_start|>assistant\n".into(),
        }
    }
}

/// Template strings. Placeholders: `{src_lang}`, `{tgt_lang}`, `{src}`,
/// `{tgt}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub sentence_instruction: String,
    pub explicit_instruction: String,
    pub context_pair: String,
    pub sentence_query: String,
    pub context_query: String,
    pub line_separator: String,
    pub chat: ChatMarkers,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            sentence_instruction: "Translate the following {src_lang} source text to {tgt_lang}:".into(),
            explicit_instruction:
                "Given the provided parallel sentence pairs, translate the following {src_lang} sentence to {tgt_lang}:"
                    .into(),
            context_pair: "{src_lang}: {src} {tgt_lang}: {tgt}".into(),
            sentence_query: "{src_lang}: {src} {tgt_lang}:".into(),
            context_query: "{src_lang}: {src} {tgt_lang}: ".into(),
            line_separator: "\n".into(),
            chat: ChatMarkers::default(),
        }
    }
}

impl PromptTemplates {
    /// Loads overrides from a `.toml` or `.json` file; missing fields keep
    /// their defaults.
    pub fn from_path(path: &Path) -> Result<Self, PromptError> {
        let load_err = |message: String| PromptError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let templates: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| load_err(e.to_string()))?
        };
        templates.check()?;
        Ok(templates)
    }

    pub fn check(&self) -> Result<(), PromptError> {
        for template in [
            &self.sentence_instruction,
            &self.explicit_instruction,
            &self.context_pair,
            &self.sentence_query,
            &self.context_query,
        ] {
            parse_template(template)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    Template,
    ContextSource(usize),
    ContextTarget(usize),
    Source,
}

impl SegmentRole {
    pub fn is_context(self) -> bool {
        matches!(
            self,
            SegmentRole::ContextSource(_) | SegmentRole::ContextTarget(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    /// Byte range in the prompt text.
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub segments: Vec<Segment>,
    /// Byte offset of the final target-language cue.
    pub cue: usize,
    #[serde(default)]
    pub chat_wrapped: bool,
}

impl RenderedPrompt {
    /// What goes between the prompt and a forced continuation.
    pub fn continuation_separator(&self) -> &'static str {
        if self.text.ends_with(char::is_whitespace) {
            ""
        } else {
            " "
        }
    }

    pub fn segment(&self, role: SegmentRole) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Literal(String),
    Slot(Slot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    SrcLang,
    TgtLang,
    Src,
    Tgt,
}

fn parse_template(template: &str) -> Result<Vec<Part>, PromptError> {
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            parts.push(Part::Literal(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| PromptError::Unterminated(template.to_string()))?;
        let name = &rest[open + 1..open + close];
        let slot = match name {
            "src_lang" => Slot::SrcLang,
            "tgt_lang" => Slot::TgtLang,
            "src" => Slot::Src,
            "tgt" => Slot::Tgt,
            other => {
                return Err(PromptError::UnknownPlaceholder(
                    other.to_string(),
                    template.to_string(),
                ))
            }
        };
        parts.push(Part::Slot(slot));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        parts.push(Part::Literal(rest.to_string()));
    }
    Ok(parts)
}

#[derive(Default)]
struct Builder {
    text: String,
    segments: Vec<Segment>,
    last_tgt_cue: usize,
}

impl Builder {
    fn push(&mut self, role: SegmentRole, s: &str) {
        if s.is_empty() {
            return;
        }
        let start = self.text.len();
        self.text.push_str(s);
        let end = self.text.len();
        match self.segments.last_mut() {
            Some(last) if last.role == role && last.range.end == start && role == SegmentRole::Template => {
                last.range.end = end;
            }
            _ => self.segments.push(Segment {
                role,
                range: start..end,
            }),
        }
    }

    fn emit(
        &mut self,
        template: &str,
        spec: &PromptSpec,
        src: (&str, SegmentRole),
        tgt: Option<(&str, SegmentRole)>,
    ) {
        let parts = parse_template(template).expect("templates are checked before rendering");
        for part in parts {
            match part {
                Part::Literal(s) => self.push(SegmentRole::Template, &s),
                Part::Slot(Slot::SrcLang) => self.push(SegmentRole::Template, &spec.src_lang_name),
                Part::Slot(Slot::TgtLang) => {
                    self.last_tgt_cue = self.text.len();
                    self.push(SegmentRole::Template, &spec.tgt_lang_name);
                }
                Part::Slot(Slot::Src) => self.push(src.1, src.0),
                Part::Slot(Slot::Tgt) => {
                    if let Some((text, role)) = tgt {
                        self.push(role, text);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptRenderer {
    templates: PromptTemplates,
}

impl PromptRenderer {
    pub fn new(templates: PromptTemplates) -> Result<Self, PromptError> {
        templates.check()?;
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Renders `src` with the given context (oldest pair first), then wraps
    /// it for chat models when `spec.chat_wrap` is set.
    pub fn render(&self, spec: &PromptSpec, context: &[SentencePair], src: &str) -> RenderedPrompt {
        let t = &self.templates;
        let mut b = Builder::default();
        let query = match spec.kind {
            PromptKind::Sentence => {
                b.emit(&t.sentence_instruction, spec, ("", SegmentRole::Source), None);
                b.push(SegmentRole::Template, &t.line_separator);
                &t.sentence_query
            }
            PromptKind::Generic | PromptKind::Explicit => {
                for (i, pair) in context.iter().enumerate() {
                    b.emit(
                        &t.context_pair,
                        spec,
                        (&pair.src, SegmentRole::ContextSource(i)),
                        Some((pair.tgt_text(), SegmentRole::ContextTarget(i))),
                    );
                    b.push(SegmentRole::Template, &t.line_separator);
                }
                if spec.kind == PromptKind::Explicit {
                    b.emit(&t.explicit_instruction, spec, ("", SegmentRole::Source), None);
                    b.push(SegmentRole::Template, &t.line_separator);
                }
                &t.context_query
            }
        };
        b.emit(query, spec, (src, SegmentRole::Source), None);
        let rendered = RenderedPrompt {
            text: b.text,
            segments: b.segments,
            cue: b.last_tgt_cue,
            chat_wrapped: false,
        };
        if spec.chat_wrap {
            self.wrap_chat(&rendered).expect("fresh prompt is unwrapped")
        } else {
            rendered
        }
    }

    /// `<user_start>{prompt}<user_end><assistant_start>`.
    pub fn wrap_chat(&self, rendered: &RenderedPrompt) -> Result<RenderedPrompt, PromptError> {
        let markers = &self.templates.chat;
        if rendered.chat_wrapped || rendered.text.starts_with(&markers.user_start) {
            return Err(PromptError::AlreadyWrapped);
        }
        let shift = markers.user_start.len();
        let mut b = Builder::default();
        b.push(SegmentRole::Template, &markers.user_start);
        for seg in &rendered.segments {
            b.push(seg.role, &rendered.text[seg.range.clone()]);
        }
        b.push(SegmentRole::Template, &markers.user_end);
        b.push(SegmentRole::Template, &markers.assistant_start);
        Ok(RenderedPrompt {
            text: b.text,
            segments: b.segments,
            cue: rendered.cue + shift,
            chat_wrapped: true,
        })
    }
}

/// Renders with the default templates.
pub fn render(spec: &PromptSpec, context: &[SentencePair], src: &str) -> RenderedPrompt {
    PromptRenderer::default().render(spec, context, src)
}
