//! Labeled examples, JSONL reading/writing, and the template expander used to
//! build identity-term bias evaluation sets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("template set has no templates or no identity terms")]
    EmptyTemplates,
}

/// One evaluation or training example.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct LabeledExample {
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subgroups: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Primary-attribute score attached after inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Per-attribute scores attached after inference.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

impl LabeledExample {
    /// Score for an attribute: the per-attribute map first, then the primary
    /// score field.
    pub fn score_for(&self, attribute: &str) -> Option<f64> {
        self.scores.get(attribute).copied().or(self.score)
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<LabeledExample>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DataError::Parse { line: i + 1, source })
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledExample>, DataError> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// A template with a `{term}` slot and a binary label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub text: String,
    pub label: f64,
    #[serde(default)]
    pub lang: Option<String>,
}

/// Templates plus identity-term lists; the cross product generates a bias
/// evaluation corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub templates: Vec<TemplateEntry>,
    /// subgroup tag -> identity terms substituted into the slot.
    pub identities: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_attribute")]
    pub attribute: String,
}

fn default_attribute() -> String {
    "toxicity".to_string()
}

pub const TEMPLATE_SLOT: &str = "{term}";

/// Expand every template against every identity term.
pub fn expand_templates(spec: &TemplateSpec) -> Result<Vec<LabeledExample>, DataError> {
    if spec.templates.is_empty() || spec.identities.values().all(|v| v.is_empty()) {
        return Err(DataError::EmptyTemplates);
    }
    let mut out = Vec::new();
    for template in &spec.templates {
        for (tag, terms) in &spec.identities {
            for term in terms {
                let mut labels = BTreeMap::new();
                labels.insert(spec.attribute.clone(), template.label);
                out.push(LabeledExample {
                    text: template.text.replace(TEMPLATE_SLOT, term),
                    labels,
                    lang: template.lang.clone(),
                    subgroups: vec![tag.clone()],
                    ..Default::default()
                });
            }
        }
    }
    Ok(out)
}
