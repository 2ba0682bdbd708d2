//! Concept vocabulary: the ordered list of concepts the encoder is trained on.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default dermoscopic criteria, in encoder-filter order.
pub const DEFAULT_CONCEPTS: [(&str, &str); 8] = [
    ("APN", "atypical pigment network"),
    ("TPN", "typical pigment network"),
    ("BWV", "blue whitish veil"),
    ("ISTR", "irregular streaks"),
    ("RSTR", "regular streaks"),
    ("RDG", "regular dots and globules"),
    ("IDG", "irregular dots and globules"),
    ("RS", "regression structures"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    phrases: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(names: Vec<String>, phrases: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("vocabulary must contain at least one concept".into()));
        }
        if names.len() != phrases.len() {
            return Err(Error::Vocabulary(format!(
                "{} names but {} phrases",
                names.len(),
                phrases.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate concept name {name:?}")));
            }
        }
        Ok(Self { names, phrases })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Human-readable phrase, title-cased, for report text.
    pub fn display_phrase(&self, index: usize) -> String {
        self.phrases[index]
            .split(' ')
            .map(|w| {
                let mut c = w.chars();
                match c.next() {
                    Some(f) if w != "and" => f.to_uppercase().chain(c).collect(),
                    _ => w.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for ConceptVocabulary {
    fn default() -> Self {
        let (names, phrases) = DEFAULT_CONCEPTS
            .iter()
            .map(|(n, p)| (n.to_string(), p.to_string()))
            .unzip();
        Self { names, phrases }
    }
}
