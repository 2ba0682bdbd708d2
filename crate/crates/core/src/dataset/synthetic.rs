//! Desk-scale synthetic lesion images with planted concept motifs.
//!
//! Each image shows a skin-toned background (optionally crossed by hairs), an
//! irregular elliptical lesion and, for every present concept, one motif drawn
//! strictly inside the lesion. Every sample is a pure function of
//! `(seed, index, spec)`, so geometry can be regenerated for verification.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::imageio;
use super::manifest::{DatasetManifest, ManifestRow};
use super::sample::Split;
use crate::error::{Error, Result};
use crate::vocab::ConceptVocabulary;

pub const NUM_MOTIFS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// Split sizes for `n` items: train and val are rounded, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.val + self.test;
        let train = ((self.train / total) * n as f64).round() as usize;
        let val = (((self.val / total) * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Independent presence probability of each motif.
    pub concept_probability: f64,
    /// Vocabulary indices of the motifs that count towards the melanoma rule.
    pub atypical: Vec<usize>,
    pub min_atypical: usize,
    pub split: SplitFractions,
    pub hair_probability: f64,
    pub noise_std: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            concept_probability: 0.5,
            // APN, BWV, ISTR, IDG, RS
            atypical: vec![0, 2, 3, 6, 7],
            min_atypical: 2,
            split: SplitFractions::default(),
            hair_probability: 0.5,
            noise_std: 0.025,
        }
    }
}

impl SyntheticSpec {
    pub fn label_for(&self, concepts: &[u8]) -> usize {
        let atypical = self.atypical.iter().filter(|&&k| concepts[k] == 1).count();
        usize::from(atypical >= self.min_atypical)
    }

    /// Largest motif radius; crowded lesions get smaller motifs.
    fn motif_radius(&self) -> f32 {
        (self.image_size as f32 / 8.0).max(4.0)
    }
}

#[derive(Debug, Clone)]
pub struct PlantedMotif {
    pub concept: usize,
    pub center: (f32, f32),
    /// Pixels the motif may paint (its disk).
    pub footprint: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct SyntheticRender {
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
    pub concepts: Vec<u8>,
    pub label: usize,
    pub motifs: Vec<PlantedMotif>,
}

#[derive(Debug, Clone, Copy)]
struct Lesion {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    angle: f32,
    wobble: f32,
    freq: f32,
    phase: f32,
}

impl Lesion {
    fn draw(rng: &mut ChaCha8Rng, size: f32) -> Self {
        Self {
            cx: size * (0.5 + rng.gen_range(-0.06..0.06)),
            cy: size * (0.5 + rng.gen_range(-0.06..0.06)),
            a: size * rng.gen_range(0.33..0.42),
            b: size * rng.gen_range(0.33..0.42),
            angle: rng.gen_range(0.0..std::f32::consts::PI),
            wobble: rng.gen_range(0.0..0.06),
            freq: rng.gen_range(3..6) as f32,
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        r <= 1.0 + self.wobble * (self.freq * phi + self.phase).sin()
    }

    fn mask(&self, size: usize) -> Array2<bool> {
        Array2::from_shape_fn((size, size), |(y, x)| {
            self.contains(x as f32 + 0.5, y as f32 + 0.5)
        })
    }
}

/// Per-motif random parameters, drawn before painting.
#[derive(Debug, Clone)]
enum MotifStyle {
    IrregularNetwork { phase: (f32, f32) },
    RegularNetwork,
    Veil,
    IrregularStreaks { angles: Vec<f32> },
    RegularStreaks { offset: f32 },
    RegularDots,
    IrregularDots { dots: Vec<(f32, f32, f32)> },
    Regression,
}

impl MotifStyle {
    fn draw(concept: usize, radius: f32, rng: &mut ChaCha8Rng) -> Self {
        use std::f32::consts::TAU;
        match concept {
            0 => MotifStyle::IrregularNetwork {
                phase: (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)),
            },
            1 => MotifStyle::RegularNetwork,
            2 => MotifStyle::Veil,
            3 => MotifStyle::IrregularStreaks {
                angles: (0..5).map(|_| rng.gen_range(0.0..TAU)).collect(),
            },
            4 => MotifStyle::RegularStreaks {
                offset: rng.gen_range(0.0..TAU / 8.0),
            },
            5 => MotifStyle::RegularDots,
            6 => MotifStyle::IrregularDots {
                dots: (0..12)
                    .map(|_| {
                        let a = rng.gen_range(0.0..TAU);
                        let d = rng.gen_range(0.0..(radius - 2.0).max(1.0));
                        (d * a.cos(), d * a.sin(), rng.gen_range(1.0..2.5))
                    })
                    .collect(),
            },
            _ => MotifStyle::Regression,
        }
    }

    /// Colour painted at offset `(dx, dy)` from the motif centre: the
    /// motif's pattern over its own tinted ground.
    fn paint(&self, dx: f32, dy: f32) -> [f32; 3] {
        let streak = |angles: &[f32]| {
            let d = (dx * dx + dy * dy).sqrt();
            d >= 1.5
                && angles.iter().any(|&a| {
                    let (s, c) = a.sin_cos();
                    (dx * c + dy * s) > 0.0 && (dx * s - dy * c).abs() < 0.9
                })
        };
        match self {
            MotifStyle::IrregularNetwork { phase } => {
                let gx = dx + 1.2 * (dy * 0.9 + phase.0).sin();
                let gy = dy + 1.2 * (dx * 0.8 + phase.1).sin();
                let on = gx.rem_euclid(5.0) < 1.7 || gy.rem_euclid(5.0) < 1.7;
                if on { [0.18, 0.09, 0.04] } else { [0.42, 0.26, 0.10] }
            }
            MotifStyle::RegularNetwork => {
                let on = dx.round().rem_euclid(4.0) == 0.0 || dy.round().rem_euclid(4.0) == 0.0;
                if on { [0.36, 0.24, 0.06] } else { [0.84, 0.78, 0.30] }
            }
            MotifStyle::Veil => [0.55, 0.66, 0.88],
            MotifStyle::IrregularStreaks { angles } => {
                if streak(angles) { [0.08, 0.04, 0.04] } else { [0.40, 0.22, 0.30] }
            }
            MotifStyle::RegularStreaks { offset } => {
                let angles: Vec<f32> = (0..8).map(|i| offset + i as f32 * std::f32::consts::TAU / 8.0).collect();
                if streak(&angles) { [0.62, 0.12, 0.10] } else { [0.86, 0.52, 0.40] }
            }
            MotifStyle::RegularDots => {
                let fx = (dx + 3.0).rem_euclid(6.0) - 3.0;
                let fy = (dy + 3.0).rem_euclid(6.0) - 3.0;
                let on = fx * fx + fy * fy <= 1.8 * 1.8;
                if on { [0.30, 0.12, 0.38] } else { [0.62, 0.50, 0.66] }
            }
            MotifStyle::IrregularDots { dots } => {
                let on = dots.iter().any(|&(x, y, r)| (dx - x).powi(2) + (dy - y).powi(2) <= r * r);
                if on { [0.05, 0.28, 0.30] } else { [0.34, 0.48, 0.40] }
            }
            MotifStyle::Regression => {
                let speck = ((dx.round() as i32) * 7 + (dy.round() as i32) * 13).rem_euclid(5) == 0;
                if speck { [0.55, 0.55, 0.60] } else { [0.95, 0.94, 0.93] }
            }
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn disk(size: usize, center: (f32, f32), radius: f32) -> Array2<bool> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let dx = x as f32 + 0.5 - center.0;
        let dy = y as f32 + 0.5 - center.1;
        dx * dx + dy * dy <= radius * radius
    })
}

/// Lays out lesion and motif centres; retries with a fresh lesion and a
/// slightly smaller motif radius when the motifs do not fit.
fn layout(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, present: &[usize]) -> (Array2<bool>, Vec<(f32, f32)>, f32) {
    let size = spec.image_size;
    let mut radius = spec.motif_radius();
    loop {
        let lesion = Lesion::draw(rng, size as f32);
        let mask = lesion.mask(size);
        let reach = lesion.a.max(lesion.b);
        let mut centers: Vec<(f32, f32)> = Vec::with_capacity(present.len());
        let mut tries = 0;
        while centers.len() < present.len() && tries < 600 {
            tries += 1;
            let c = (
                lesion.cx + rng.gen_range(-reach..reach),
                lesion.cy + rng.gen_range(-reach..reach),
            );
            let clear = centers
                .iter()
                .all(|o| ((o.0 - c.0).powi(2) + (o.1 - c.1).powi(2)).sqrt() >= 2.0 * radius + 2.0);
            if !clear {
                continue;
            }
            let inside = disk(size, c, radius + 1.0)
                .indexed_iter()
                .all(|((y, x), &d)| !d || mask[[y, x]]);
            if inside {
                centers.push(c);
            }
        }
        if centers.len() == present.len() {
            return (mask, centers, radius);
        }
        radius = (radius * 0.95).max(3.0);
    }
}

pub fn render_sample(seed: u64, index: usize, spec: &SyntheticSpec) -> SyntheticRender {
    let size = spec.image_size;
    let mut rng = sample_rng(seed, index);
    let concepts: Vec<u8> = (0..NUM_MOTIFS)
        .map(|_| u8::from(rng.gen_bool(spec.concept_probability)))
        .collect();
    let present: Vec<usize> = (0..NUM_MOTIFS).filter(|&k| concepts[k] == 1).collect();
    let (lesion, centers, radius) = layout(&mut rng, spec, &present);

    let jitter = |rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32| {
        let shift = rng.gen_range(-amount..amount);
        base.map(|c| c + shift)
    };
    let skin = jitter(&mut rng, [0.88, 0.70, 0.60], 0.04);
    let lesion_color = jitter(&mut rng, [0.58, 0.40, 0.28], 0.05);
    let mut image = Array3::from_shape_fn((3, size, size), |(c, _, _)| skin[c]);

    if rng.gen_bool(spec.hair_probability) {
        let hairs = rng.gen_range(1..=3);
        for _ in 0..hairs {
            let s = size as f32;
            let (x0, y0) = (rng.gen_range(0.0..s), 0.0f32);
            let (x1, y1) = (rng.gen_range(0.0..s), s);
            let bend = rng.gen_range(-0.2..0.2) * s;
            let steps = size * 4;
            for t in 0..=steps {
                let t = t as f32 / steps as f32;
                let x = x0 + (x1 - x0) * t + bend * 4.0 * t * (1.0 - t);
                let y = y0 + (y1 - y0) * t;
                let (xi, yi) = (x as isize, y as isize);
                if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                    for (c, v) in [0.25, 0.18, 0.12].into_iter().enumerate() {
                        image[[c, yi as usize, xi as usize]] = v;
                    }
                }
            }
        }
    }

    for ((y, x), &inside) in lesion.indexed_iter() {
        if inside {
            for c in 0..3 {
                image[[c, y, x]] = lesion_color[c];
            }
        }
    }

    let mut motifs = Vec::with_capacity(present.len());
    for (&concept, &center) in present.iter().zip(&centers) {
        let style = MotifStyle::draw(concept, radius, &mut rng);
        let footprint = disk(size, center, radius);
        for ((y, x), &on) in footprint.indexed_iter() {
            if !on || !lesion[[y, x]] {
                continue;
            }
            let dx = x as f32 + 0.5 - center.0;
            let dy = y as f32 + 0.5 - center.1;
            let color = style.paint(dx, dy);
            for c in 0..3 {
                image[[c, y, x]] = color[c];
            }
        }
        motifs.push(PlantedMotif {
            concept,
            center,
            footprint,
        });
    }

    let noise = Normal::new(0.0f32, spec.noise_std).expect("finite noise std");
    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));

    SyntheticRender {
        image,
        mask: lesion.mapv(|b| if b { 1.0 } else { 0.0 }),
        label: spec.label_for(&concepts),
        concepts,
        motifs,
    }
}

/// Split assignment for `n` synthetic samples.
pub fn assign_splits(n: usize, seed: u64, fractions: &SplitFractions) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, val, _) = fractions.counts(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes `n` synthetic samples plus `manifest.csv` under `out_dir`.
pub fn generate_synthetic(n: usize, seed: u64, spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::Argument(format!("synthetic dataset needs n >= 10, got {n}")));
    }
    if spec.atypical.iter().any(|&k| k >= NUM_MOTIFS) {
        return Err(Error::Argument("atypical motif index out of range".into()));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let splits = assign_splits(n, seed, &spec.split);
    let mut rows = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let render = render_sample(seed, i, spec);
        let image_rel = format!("images/synth_{i:05}.png");
        let mask_rel = format!("masks/synth_{i:05}.png");
        imageio::save_rgb(&out_dir.join(&image_rel), render.image.view())?;
        imageio::save_mask(&out_dir.join(&mask_rel), render.mask.view())?;
        rows.push(ManifestRow {
            image_path: image_rel,
            mask_path: Some(mask_rel),
            label: render.label.to_string(),
            concepts: render.concepts,
            split,
        });
    }
    let manifest = DatasetManifest {
        concept_names: ConceptVocabulary::default().names().to_vec(),
        rows,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
