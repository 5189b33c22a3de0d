//! Prompt-bank text directions: substitute a class into every template, embed
//! and average per class, and normalize the target-minus-neutral difference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::gateway::{BackendBundle, JointEmbedding};

const IMAGENET_TEMPLATES: &str = include_str!("../../assets/imagenet_templates.txt");

/// Identifier of the built-in 80-template bank.
pub const DEFAULT_BANK_ID: &str = "imagenet80";

/// Slot marker inside a template.
pub const SLOT: &str = "{}";

/// A target attribute and its neutral class, e.g. "a sports car" / "a car".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub target_text: String,
    pub neutral_text: String,
    #[serde(default = "default_bank_id")]
    pub template_bank_id: String,
}

fn default_bank_id() -> String {
    DEFAULT_BANK_ID.to_string()
}

impl PromptSpec {
    pub fn new(target: impl Into<String>, neutral: impl Into<String>) -> Result<Self> {
        let spec = PromptSpec {
            target_text: target.into(),
            neutral_text: neutral.into(),
            template_bank_id: default_bank_id(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_text.trim().is_empty() || self.neutral_text.trim().is_empty() {
            return Err(EditError::DegeneratePrompt(
                "target and neutral text must both be non-empty".into(),
            ));
        }
        if self.target_text == self.neutral_text {
            return Err(EditError::DegeneratePrompt(format!(
                "target and neutral are identical ({:?})",
                self.target_text
            )));
        }
        Ok(())
    }
}

/// Ordered sentence templates, each with exactly one `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    id: String,
    templates: Vec<String>,
}

impl TemplateBank {
    pub fn new(id: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(EditError::InvalidArgument("template bank is empty".into()));
        }
        for t in &templates {
            if t.matches(SLOT).count() != 1 {
                return Err(EditError::InvalidArgument(format!(
                    "template {t:?} must contain exactly one {SLOT} slot"
                )));
            }
        }
        Ok(TemplateBank {
            id: id.into(),
            templates,
        })
    }

    /// The 80 ImageNet zero-shot templates.
    pub fn imagenet() -> Self {
        Self::parse(DEFAULT_BANK_ID, IMAGENET_TEMPLATES).expect("bundled bank is valid")
    }

    /// Parses a newline-delimited bank; blank lines are skipped.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        Self::new(id, templates)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(id, &std::fs::read_to_string(path)?)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Every template with `class` substituted.
    pub fn sentences(&self, class: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(SLOT, class, 1))
            .collect()
    }
}

/// Mean of the unit text embeddings of every sentence in the bank.
pub fn class_embedding(
    backend: &BackendBundle,
    bank: &TemplateBank,
    class: &str,
) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; backend.embed_dim()];
    for sentence in bank.sentences(class) {
        let e = backend.embed_text(&sentence)?;
        mean.iter_mut().zip(e.values()).for_each(|(m, v)| *m += v);
    }
    let n = bank.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Unit text direction from the neutral class to the target attribute.
pub fn encode_prompt_pair(
    backend: &BackendBundle,
    spec: &PromptSpec,
    bank: &TemplateBank,
) -> Result<JointEmbedding> {
    spec.validate()?;
    let target = class_embedding(backend, bank, &spec.target_text)?;
    let neutral = class_embedding(backend, bank, &spec.neutral_text)?;
    let diff: Vec<f64> = target.iter().zip(&neutral).map(|(t, n)| t - n).collect();
    if diff.iter().all(|d| *d == 0.0) {
        return Err(EditError::DegeneratePrompt(format!(
            "{:?} and {:?} embed identically",
            spec.target_text, spec.neutral_text
        )));
    }
    JointEmbedding::normalize(diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_bank_has_eighty_templates() {
        let bank = TemplateBank::imagenet();
        assert_eq!(bank.len(), 80);
        assert_eq!(bank.id(), DEFAULT_BANK_ID);
        assert_eq!(bank.templates()[0], "a bad photo of a {}.");
        assert!(bank.templates().iter().any(|t| t == "a painting of a {}."));
        assert!(bank
            .templates()
            .iter()
            .any(|t| t == "a cropped photo of the {}."));
        assert!(bank
            .templates()
            .iter()
            .any(|t| t == "a black and white photo of a {}."));
    }

    #[test]
    fn substitution_fills_the_single_slot() {
        let bank =
            TemplateBank::parse("mini", "a photo of a {}.\n\nthe {} in a video game.\n").unwrap();
        assert_eq!(
            bank.sentences("car"),
            vec!["a photo of a car.", "the car in a video game."]
        );
    }

    #[test]
    fn malformed_banks_rejected() {
        assert!(TemplateBank::parse("x", "").is_err());
        assert!(TemplateBank::parse("x", "no slot").is_err());
        assert!(TemplateBank::parse("x", "{} and {}").is_err());
    }

    #[test]
    fn prompt_spec_validation() {
        assert!(PromptSpec::new("a sports car", "a car").is_ok());
        assert!(matches!(
            PromptSpec::new("hair", "hair"),
            Err(EditError::DegeneratePrompt(_))
        ));
        assert!(PromptSpec::new("", "hair").is_err());
    }
}
