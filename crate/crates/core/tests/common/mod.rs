//! Scalar-loop reference implementations and random instance builders
//! shared by the integration tests. Everything here works on plain nested
//! `Vec`s and indexes element by element, independent of the library code.

#![allow(dead_code)]

pub mod suites;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One random loss instance with the tensors every term consumes.
#[derive(Debug, Clone)]
pub struct Instance {
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
    pub logits: Array2<f64>,
    pub z: Array2<f64>,
    pub visual: Array3<f64>,
    pub phrase: Array2<f64>,
    pub maps: Array4<f64>,
    pub targets: Array4<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// `batch` samples, `k` concepts, `p x q` maps, `d` embedding width.
/// Every sample has at least one present concept; targets are a soft lesion
/// mask copied into the channels of present concepts.
pub fn instance(r: &mut ChaCha8Rng, batch: usize, k: usize, p: usize, q: usize, d: usize) -> Instance {
    let mut z = Array2::zeros((batch, k));
    for i in 0..batch {
        for j in 0..k {
            z[[i, j]] = f64::from(u8::from(r.gen_bool(0.5)));
        }
        let forced = r.gen_range(0..k);
        z[[i, forced]] = 1.0;
    }
    let mut targets = Array4::zeros((batch, k, p, q));
    for i in 0..batch {
        let mask: Vec<f64> = (0..p * q).map(|_| r.gen_range(0.0..1.0)).collect();
        for j in 0..k {
            if z[[i, j]] > 0.0 {
                for c in 0..p * q {
                    targets[[i, j, c / q, c % q]] = mask[c];
                }
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..batch).map(|i| (i, (i + 1) % batch)).collect();
    if batch < 2 {
        pairs.clear();
    }
    Instance {
        scores: Array2::from_shape_fn((batch, 2), |_| r.gen_range(-3.0..3.0)),
        labels: (0..batch).map(|_| r.gen_range(0..2)).collect(),
        logits: Array2::from_shape_fn((batch, k), |_| r.gen_range(-3.0..3.0)),
        z,
        visual: Array3::from_shape_fn((batch, k, d), |_| r.gen_range(-1.0..1.0)),
        phrase: Array2::from_shape_fn((k, d), |_| r.gen_range(-1.0..1.0)),
        maps: Array4::from_shape_fn((batch, k, p, q), |_| r.gen_range(0.0..1.5)),
        targets,
        pairs,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn row3(x: &Array3<f64>, i: usize, k: usize) -> Vec<f64> {
    (0..x.dim().2).map(|c| x[[i, k, c]]).collect()
}

fn row2(x: &Array2<f64>, k: usize) -> Vec<f64> {
    (0..x.ncols()).map(|c| x[[k, c]]).collect()
}

/// Softmax cross-entropy, batch mean.
pub fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..labels.len() {
        let mut denom = 0.0;
        for c in 0..scores.ncols() {
            denom += scores[[i, c]].exp();
        }
        total += -(scores[[i, labels[i]]].exp() / denom).ln();
    }
    total / labels.len() as f64
}

/// Binary cross-entropy of `1 / (1 + e^-v)` against `z`, summed over
/// concepts, batch mean.
pub fn bce(logits: &Array2<f64>, z: &Array2<f64>) -> f64 {
    let (b, k) = logits.dim();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..k {
            let s = 1.0 / (1.0 + (-logits[[i, j]]).exp());
            total -= z[[i, j]] * s.ln() + (1.0 - z[[i, j]]) * (1.0 - s).ln();
        }
    }
    total / b as f64
}

pub fn triplet(visual: &Array3<f64>, phrase: &Array2<f64>, z: &Array2<f64>, alpha: f64) -> f64 {
    let (b, k, _) = visual.dim();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..k {
            if z[[i, j]] != 1.0 {
                continue;
            }
            let v = row3(visual, i, j);
            let own = cos(&v, &row2(phrase, j));
            for other in 0..k {
                if other != j {
                    total += (cos(&v, &row2(phrase, other)) - own + alpha).max(0.0);
                }
            }
        }
    }
    total / b as f64
}

pub fn counter(visual: &Array3<f64>, phrase: &Array2<f64>, z: &Array2<f64>, pairs: &[(usize, usize)], beta: f64) -> f64 {
    let (b, k, _) = visual.dim();
    let mut total = 0.0;
    for &(i, j) in pairs {
        for c in 0..k {
            if z[[i, c]] == 1.0 && z[[j, c]] == 0.0 {
                let s = row2(phrase, c);
                let with = cos(&row3(visual, i, c), &s);
                let without = cos(&row3(visual, j, c), &s);
                total += (without - with + beta).max(0.0);
            }
        }
    }
    total / b as f64
}

/// Soft-Dice coherence for present concepts and the scaled mean-square
/// penalty for absent ones, batch mean. `product` selects the
/// `sum A^2 * sum M^2` denominator.
pub fn coherence(maps: &Array4<f64>, targets: &Array4<f64>, z: &Array2<f64>, eps: f64, product: bool, absent_weight: f64) -> f64 {
    let (b, k, p, q) = maps.dim();
    let mut total = 0.0;
    for i in 0..b {
        for c in 0..k {
            let mut am = 0.0;
            let mut aa = 0.0;
            let mut mm = 0.0;
            for y in 0..p {
                for x in 0..q {
                    let a = maps[[i, c, y, x]];
                    let m = targets[[i, c, y, x]];
                    am += a * m;
                    aa += a * a;
                    mm += m * m;
                }
            }
            if z[[i, c]] == 1.0 {
                let denom = if product { aa * mm + eps } else { aa + mm + eps };
                total += 1.0 - 2.0 * am / denom;
            } else {
                total += absent_weight * aa / (p * q) as f64;
            }
        }
    }
    total / b as f64
}

/// `softmax_k(v_k w_k)` by direct exponentiation.
pub fn contributions(v: &[f64], w: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().zip(w).map(|(a, b)| (a * b).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted
/// as one half.
pub fn auc_all_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for a in 0..scores.len() {
        for b in 0..scores.len() {
            if positive[a] && !positive[b] {
                pairs += 1;
                if scores[a] > scores[b] {
                    wins += 1.0;
                } else if scores[a] == scores[b] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error; entries where both gradients are
/// below `floor` in magnitude are compared against `floor` instead.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
