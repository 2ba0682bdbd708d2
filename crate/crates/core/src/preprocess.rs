//! Segmentation hard attention and feature-resolution coherence targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{imageio, Sample};
use crate::error::{Error, Result};

/// How the network input is derived from the raw image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreprocessMode {
    /// Unmasked image.
    #[serde(rename = "raw")]
    Raw,
    /// Masks exported by an external segmentation model.
    #[serde(rename = "external-segmenter")]
    ExternalSegmenter,
    /// Ground-truth masks referenced by the manifest.
    #[serde(rename = "manual-oracle")]
    ManualOracle,
}

impl PreprocessMode {
    pub const ALL: [PreprocessMode; 3] = [Self::Raw, Self::ExternalSegmenter, Self::ManualOracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::ExternalSegmenter => "external-segmenter",
            Self::ManualOracle => "manual-oracle",
        }
    }

    pub fn is_masked(self) -> bool {
        self != Self::Raw
    }
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preprocessing mode {s:?}")))
    }
}

/// Produces a binary lesion mask at the sample's image resolution.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &'static str;
    fn segment(&self, sample: &Sample) -> Result<Array2<f32>>;
}

/// Returns the manifest's ground-truth mask.
#[derive(Debug, Default)]
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn name(&self) -> &'static str {
        "manual-oracle"
    }

    fn segment(&self, sample: &Sample) -> Result<Array2<f32>> {
        sample
            .lesion_mask
            .clone()
            .ok_or_else(|| Error::Schema(format!("sample {} has no mask_path", sample.id)))
    }
}

/// Reads `<image_stem>.mask.png`, either next to the image or from a directory.
#[derive(Debug, Default)]
pub struct ExternalSegmenter {
    pub mask_dir: Option<PathBuf>,
}

impl ExternalSegmenter {
    pub fn mask_path_for(&self, image_path: &Path) -> PathBuf {
        let stem = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = format!("{stem}.mask.png");
        match &self.mask_dir {
            Some(dir) => dir.join(file),
            None => image_path.with_file_name(file),
        }
    }
}

impl Segmenter for ExternalSegmenter {
    fn name(&self) -> &'static str {
        "external-segmenter"
    }

    fn segment(&self, sample: &Sample) -> Result<Array2<f32>> {
        let source = sample.source.as_ref().ok_or_else(|| {
            Error::Argument(format!("sample {} has no source path for mask lookup", sample.id))
        })?;
        let path = self.mask_path_for(source);
        if !path.is_file() {
            return Err(Error::Io {
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "external mask not found"),
                path,
            });
        }
        imageio::load_mask(&path, sample.spatial_dims())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmenterOptions {
    pub external_mask_dir: Option<PathBuf>,
}

type SegmenterFactory = fn(&SegmenterOptions) -> Box<dyn Segmenter>;

/// Name -> segmenter constructor. The `raw` mode has no segmenter.
pub struct SegmenterRegistry {
    factories: BTreeMap<&'static str, SegmenterFactory>,
}

impl SegmenterRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        reg.register("manual-oracle", |_| Box::new(OracleSegmenter));
        reg.register("external-segmenter", |opts| {
            Box::new(ExternalSegmenter {
                mask_dir: opts.external_mask_dir.clone(),
            })
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, factory: SegmenterFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, name: &str, opts: &SegmenterOptions) -> Result<Box<dyn Segmenter>> {
        self.factories
            .get(name)
            .map(|f| f(opts))
            .ok_or_else(|| Error::Config(format!("no segmenter registered as {name:?}")))
    }
}

/// Zeroes every pixel outside the mask (mask broadcast over channels).
pub fn apply_hard_attention(image: ArrayView3<f32>, mask: ArrayView2<f32>) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Argument(format!(
            "mask shape {:?} does not match image spatial shape {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut out = image.to_owned();
    for mut channel in out.axis_iter_mut(Axis(0)) {
        channel.zip_mut_with(&mask, |v, &m| {
            if m < 0.5 {
                *v = 0.0;
            }
        });
    }
    Ok(out)
}

/// Row-stochastic-by-area weights mapping `n` pixels onto `m` cells.
fn area_weights(n: usize, m: usize) -> Array2<f64> {
    let scale = n as f64 / m as f64;
    Array2::from_shape_fn((m, n), |(cell, px)| {
        let lo = (cell as f64 * scale).max(px as f64);
        let hi = ((cell + 1) as f64 * scale).min(px as f64 + 1.0);
        (hi - lo).max(0.0) / scale
    })
}

/// Area-average resampling to `p x q`; preserves the mean exactly.
pub fn downsample_area(mask: ArrayView2<f32>, p: usize, q: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let m = mask.mapv(f64::from);
    area_weights(h, p).dot(&m).dot(&area_weights(w, q).t())
}

/// Per-concept coherence targets at concept-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceTarget {
    /// k x p x q, values in [0, 1].
    pub masks: Array3<f64>,
}

pub fn build_coherence_targets(mask: ArrayView2<f32>, z: &[u8], p: usize, q: usize) -> Result<CoherenceTarget> {
    if p == 0 || q == 0 {
        return Err(Error::Argument("feature dims must be >= 1".into()));
    }
    if mask.is_empty() {
        return Err(Error::Argument("empty lesion mask".into()));
    }
    Ok(targets_from_downsampled(downsample_area(mask, p, q).view(), z))
}

pub fn targets_from_downsampled(down: ArrayView2<f64>, z: &[u8]) -> CoherenceTarget {
    let (p, q) = down.dim();
    let mut masks = Array3::zeros((z.len(), p, q));
    for (k, &present) in z.iter().enumerate() {
        if present == 1 {
            masks.index_axis_mut(Axis(0), k).assign(&down);
        }
    }
    CoherenceTarget { masks }
}

/// Network input plus the region mask that drives the coherence loss.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Array3<f32>,
    pub region: Option<Array2<f32>>,
}

pub struct Preprocessor {
    mode: PreprocessMode,
    segmenter: Option<Box<dyn Segmenter>>,
}

impl Preprocessor {
    pub fn new(mode: PreprocessMode, opts: &SegmenterOptions) -> Result<Self> {
        Self::from_registry(&SegmenterRegistry::with_defaults(), mode, opts)
    }

    pub fn from_registry(registry: &SegmenterRegistry, mode: PreprocessMode, opts: &SegmenterOptions) -> Result<Self> {
        let segmenter = if mode.is_masked() {
            Some(registry.build(mode.as_str(), opts)?)
        } else {
            None
        };
        Ok(Self { mode, segmenter })
    }

    pub fn mode(&self) -> PreprocessMode {
        self.mode
    }

    /// In raw mode the image passes through untouched and the manifest mask,
    /// when present, is still used as the coherence region.
    pub fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        match &self.segmenter {
            None => Ok(PreparedSample {
                image: sample.image.clone(),
                region: sample.lesion_mask.clone(),
            }),
            Some(seg) => {
                let mask = seg.segment(sample)?;
                Ok(PreparedSample {
                    image: apply_hard_attention(sample.image.view(), mask.view())?,
                    region: Some(mask),
                })
            }
        }
    }
}

/// A fully prepared network input: hard-attended image plus the lesion
/// region at concept-map resolution.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub id: String,
    pub image: Array3<f32>,
    pub label: usize,
    pub concepts: Vec<u8>,
    /// p x q area-averaged region, when a mask is available.
    pub region: Option<Array2<f64>>,
}

impl ModelInput {
    /// Mirror image and region left to right.
    pub fn flipped(&self) -> (Array3<f32>, Option<Array2<f64>>) {
        let mut image = self.image.clone();
        image.invert_axis(Axis(2));
        let region = self.region.as_ref().map(|r| {
            let mut r = r.clone();
            r.invert_axis(Axis(1));
            r
        });
        (image, region)
    }
}

/// Prepares every sample in parallel, preserving input order.
pub fn prepare_inputs(samples: &[Sample], pre: &Preprocessor, map_dims: (usize, usize)) -> Result<Vec<ModelInput>> {
    samples
        .par_iter()
        .map(|s| {
            let prepared = pre.prepare(s)?;
            Ok(ModelInput {
                id: s.id.clone(),
                image: prepared.image,
                label: s.label,
                concepts: s.concepts.clone(),
                region: prepared
                    .region
                    .map(|m| downsample_area(m.view(), map_dims.0, map_dims.1)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn all_ones_mask_is_identity() {
        let img = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c + y * x) as f32 * 0.01);
        let out = apply_hard_attention(img.view(), Array2::ones((4, 5)).view()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn all_zeros_mask_annihilates() {
        let img = Array3::from_elem((3, 4, 4), 0.7f32);
        let out = apply_hard_attention(img.view(), Array2::zeros((4, 4)).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_mask() {
        let img = Array3::from_elem((2, 4, 4), 0.5f32);
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as f32);
        let out = apply_hard_attention(img.view(), mask.view()).unwrap();
        for ((_, y, x), &v) in out.indexed_iter() {
            assert_eq!(v, if (y + x) % 2 == 1 { 0.5 } else { 0.0 });
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = Array3::<f32>::zeros((3, 4, 4));
        assert!(matches!(
            apply_hard_attention(img.view(), Array2::zeros((4, 5)).view()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_mask_target_is_ones() {
        let t = build_coherence_targets(Array2::ones((16, 16)).view(), &[1, 0, 1], 4, 4).unwrap();
        assert!(t.masks.index_axis(Axis(0), 0).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(t.masks.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_concepts_give_zero_targets() {
        let t = build_coherence_targets(Array2::ones((8, 8)).view(), &[0; 8], 2, 2).unwrap();
        assert!(t.masks.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_area_average() {
        let mask = array![[1.0f32, 0.0], [0.0, 0.0]];
        let t = build_coherence_targets(mask.view(), &[1], 1, 1).unwrap();
        assert!((t.masks[[0, 0, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_dims_rejected() {
        assert!(build_coherence_targets(Array2::ones((4, 4)).view(), &[1], 0, 2).is_err());
    }

    #[test]
    fn oracle_requires_mask() {
        let s = Sample {
            id: "x".into(),
            image: Array3::zeros((3, 2, 2)),
            label: 0,
            concepts: vec![],
            lesion_mask: None,
            source: None,
            split: crate::dataset::Split::Train,
        };
        assert!(OracleSegmenter.segment(&s).is_err());
        let pre = Preprocessor::new(PreprocessMode::Raw, &SegmenterOptions::default()).unwrap();
        assert!(pre.prepare(&s).unwrap().region.is_none());
    }

    #[test]
    fn external_mask_path_convention() {
        let seg = ExternalSegmenter::default();
        assert_eq!(
            seg.mask_path_for(Path::new("/d/img_01.png")),
            PathBuf::from("/d/img_01.mask.png")
        );
        let seg = ExternalSegmenter {
            mask_dir: Some("/masks".into()),
        };
        assert_eq!(
            seg.mask_path_for(Path::new("/d/img_01.png")),
            PathBuf::from("/masks/img_01.mask.png")
        );
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PreprocessMode::ALL {
            assert_eq!(m.as_str().parse::<PreprocessMode>().unwrap(), m);
        }
        assert!("dlv3".parse::<PreprocessMode>().is_err());
    }

    fn binary_mask(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
        proptest::collection::vec(0u8..2, h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v.into_iter().map(f32::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn hard_attention_idempotent(mask in binary_mask(6, 5), fill in 0.0f32..1.0) {
            let img = Array3::from_shape_fn((3, 6, 5), |(c, y, x)| (fill + (c + y + x) as f32 * 0.03) % 1.0);
            let once = apply_hard_attention(img.view(), mask.view()).unwrap();
            let twice = apply_hard_attention(once.view(), mask.view()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn downsampling_preserves_mass(mask in binary_mask(13, 11), p in 1usize..9, q in 1usize..9) {
            let down = downsample_area(mask.view(), p, q);
            let before = mask.mapv(f64::from).mean().unwrap();
            prop_assert!((down.mean().unwrap() - before).abs() < 1e-6);
            prop_assert!(down.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }
}
