//! Concept-bottleneck skin-lesion classification with concept-mapping and
//! coherence regularization.
//!
//! The pipeline: [`dataset`] loads manifests or generates synthetic lesions,
//! [`preprocess`] applies segmentation hard attention and builds coherence
//! targets, [`model`] holds the concept-bottleneck network, [`losses`] the
//! objective, [`training`] the staged schedule, and [`explain`] / [`metrics`]
//! interpret and score trained models.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::ConceptVocabulary;
