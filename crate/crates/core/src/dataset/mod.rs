//! Data ingestion: manifest loading, synthetic generation, splits.

pub mod imageio;
mod manifest;
mod sample;
pub mod synthetic;

pub use manifest::{load_manifest, load_rows, DatasetManifest, LabelMap, LoadOptions, ManifestRow};
pub use sample::{select, Sample, Split};
pub use synthetic::{generate_synthetic, render_sample, SplitFractions, SyntheticSpec};
