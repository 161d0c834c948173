//! Prompt rendering for masked conversations.

use super::{CorpusError, MaskedExample, MASK_TOKEN};

/// A prompt template with a `{turns}` placeholder. The default template ships
/// as a versioned text asset so runs stay comparable; experiments may override
/// it through configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    body: String,
}

/// Default template, version 1.
const DEFAULT_TEMPLATE_V1: &str = include_str!("../../assets/prompt_v1.txt");

impl PromptTemplate {
    pub const PLACEHOLDER: &'static str = "{turns}";

    pub fn new(body: impl Into<String>) -> Result<Self, CorpusError> {
        let body = body.into();
        if !body.contains(Self::PLACEHOLDER) {
            return Err(CorpusError::MissingPlaceholder);
        }
        Ok(PromptTemplate { body })
    }

    /// The bundled v1 template.
    pub fn default_v1() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE_V1).expect("bundled template has placeholder")
    }

    pub fn body(&self) -> &str {
        &self.body
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::default_v1()
    }
}

/// Renders a masked example into the instruction prompt fed to the model:
/// the template's header, the turns as "Speaker: text" lines, then the
/// completion cue. The rendered string contains `[MASK]` exactly once.
pub fn render_prompt(
    ex: &MaskedExample,
    template: &PromptTemplate,
) -> Result<String, CorpusError> {
    let turns = ex
        .masked_turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker.label(), t.text))
        .collect::<Vec<_>>()
        .join("\n");
    let rendered = template.body.replace(PromptTemplate::PLACEHOLDER, &turns);
    let count = rendered.matches(MASK_TOKEN).count();
    if count != 1 {
        return Err(CorpusError::BadMaskCount { count });
    }
    Ok(rendered)
}
