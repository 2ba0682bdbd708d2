use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Schema(format!("unknown split {other:?}"))),
        }
    }
}

/// One labelled image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Channels x H x W, values in [0, 1].
    pub image: Array3<f32>,
    pub label: usize,
    /// Binary presence per vocabulary concept.
    pub concepts: Vec<u8>,
    /// Lesion mask at image resolution, when one is available.
    pub lesion_mask: Option<Array2<f32>>,
    pub source: Option<PathBuf>,
    pub split: Split,
}

impl Sample {
    pub fn spatial_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

pub fn select(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}
