use crate::data::sample::QESample;
use crate::error::{AlopeError, Result};

const PLACEHOLDERS: [&str; 4] = ["{source_lang}", "{target_lang}", "{source_text}", "{translated_text}"];

/// Scoring prompt in the GEMBA style: instruction, 0-100 scale, source, translation.
/// The translation slot comes last so the final token ends the translation.
pub const DEFAULT_TEMPLATE: &str = "Score the following translation from {source_lang} to {target_lang} \
on a continuous scale from 0 to 100, where 0 means no meaning preserved and 100 means perfect meaning and grammar.\n\
Source: {source_text}\n\
Translation: {translated_text}";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    SourceLang,
    TargetLang,
    SourceText,
    TranslatedText,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// Prompt template with each of the four placeholders present exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn new(template: &str) -> Result<Self> {
        for p in PLACEHOLDERS {
            let count = template.matches(p).count();
            if count != 1 {
                return Err(AlopeError::invalid(format!(
                    "prompt template must contain {p} exactly once (found {count})"
                )));
            }
        }
        let mut pieces = Vec::new();
        let mut rest = template;
        while let Some((pos, slot, len)) = PLACEHOLDERS
            .iter()
            .zip([Slot::SourceLang, Slot::TargetLang, Slot::SourceText, Slot::TranslatedText])
            .filter_map(|(p, s)| rest.find(p).map(|i| (i, s, p.len())))
            .min_by_key(|&(i, ..)| i)
        {
            if pos > 0 {
                pieces.push(Piece::Text(rest[..pos].to_string()));
            }
            pieces.push(Piece::Slot(slot));
            rest = &rest[pos + len..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(PromptTemplate {
            source: template.to_string(),
            pieces,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// Substitutes the sample in one pass; text inside the sample is never re-expanded.
    pub fn build(&self, sample: &QESample) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::SourceLang) => out.push_str(&sample.source_lang),
                Piece::Slot(Slot::TargetLang) => out.push_str(&sample.target_lang),
                Piece::Slot(Slot::SourceText) => out.push_str(&sample.source_text),
                Piece::Slot(Slot::TranslatedText) => out.push_str(&sample.translated_text),
            }
        }
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}
