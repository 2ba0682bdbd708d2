//! Individual objective terms. Every function reduces by the batch mean and
//! returns the gradient with respect to each of its tensor inputs.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

use super::config::{DiceDenominator, LossConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTerm {
    pub value: f64,
    /// B x k x d_e
    pub grad_visual: Array3<f64>,
    /// k x d_e
    pub grad_phrase: Array2<f64>,
}

impl EmbeddingTerm {
    fn zeros(batch: usize, k: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad_visual: Array3::zeros((batch, k, d)),
            grad_phrase: Array2::zeros((k, d)),
        }
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy between `sigmoid(logits)` and `z`, summed over
/// concepts and averaged over the batch.
pub fn uniqueness_loss(logits: ArrayView2<f64>, z: ArrayView2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), z.dim(), "logits and concept targets differ in shape");
    let batch = logits.nrows().max(1) as f64;
    // -[z log s(v) + (1-z) log(1-s(v))] = log(1 + e^v) - z v
    let value = Zip::from(&logits)
        .and(&z)
        .fold(0.0, |acc, &v, &t| acc + log1p_exp(v) - t * v)
        / batch;
    let grad = Zip::from(&logits)
        .and(&z)
        .map_collect(|&v, &t| (sigmoid(v) - t) / batch);
    (value, grad)
}

/// Softmax cross-entropy over class scores, batch-averaged.
pub fn classification_loss(scores: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    assert_eq!(scores.nrows(), labels.len(), "one label per score row");
    let batch = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(scores.dim());
    let mut value = 0.0;
    for ((row, &y), mut g) in scores.outer_iter().zip(labels).zip(grad.outer_iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        value += lse - row[y];
        g.assign(&row.mapv(|v| (v - lse).exp() / batch));
        g[y] -= 1.0 / batch;
    }
    (value / batch, grad)
}

/// Pairwise cosine matrix `C[a, b] = cos(x_a, y_b)` and the row norms.
/// Zero-norm rows give cosine 0.
struct Cosines {
    cos: Array2<f64>,
    x_norm: Vec<f64>,
    y_norm: Vec<f64>,
}

impl Cosines {
    fn new(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Self {
        let x_norm: Vec<f64> = x.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let y_norm: Vec<f64> = y.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut cos = x.dot(&y.t());
        for ((a, b), c) in cos.indexed_iter_mut() {
            let denom = x_norm[a] * y_norm[b];
            *c = if denom > 0.0 { *c / denom } else { 0.0 };
        }
        Self { cos, x_norm, y_norm }
    }

    fn degenerate(&self) -> bool {
        self.x_norm.iter().chain(&self.y_norm).any(|&n| n == 0.0)
    }

    /// Accumulates `d_cos * dcos/dx_a` into `gx` and `d_cos * dcos/dy_b` into `gy`.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        a: usize,
        b: usize,
        d_cos: f64,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        mut gx: ndarray::ArrayViewMut1<f64>,
        mut gy: ndarray::ArrayViewMut1<f64>,
    ) {
        let (nx, ny) = (self.x_norm[a], self.y_norm[b]);
        if nx == 0.0 || ny == 0.0 || d_cos == 0.0 {
            return;
        }
        let c = self.cos[[a, b]];
        gx.scaled_add(d_cos / (nx * ny), &y);
        gx.scaled_add(-d_cos * c / (nx * nx), &x);
        gy.scaled_add(d_cos / (nx * ny), &x);
        gy.scaled_add(-d_cos * c / (ny * ny), &y);
    }
}

/// Warns on the first zero-norm row; later ones are logged at debug level.
fn warn_degenerate(which: &str, count: usize) {
    static WARNED: AtomicBool = AtomicBool::new(false);
    if count == 0 {
        return;
    }
    if WARNED.swap(true, Ordering::Relaxed) {
        log::debug!("{which}: {count} zero-norm embedding rows; cosine taken as 0");
    } else {
        log::warn!("{which}: {count} zero-norm embedding rows; cosine taken as 0 (further occurrences logged at debug level)");
    }
}

/// Within-image triplet loss in the joint embedding space:
/// `sum_k z_k sum_{k' != k} max(0, cos(v_k, s_k') - cos(v_k, s_k) + alpha)`.
pub fn semantic_triplet_loss(
    visual: ArrayView3<f64>,
    phrase: ArrayView2<f64>,
    z: ArrayView2<f64>,
    alpha: f64,
) -> EmbeddingTerm {
    let (batch, k, d) = visual.dim();
    assert_eq!(phrase.dim(), (k, d), "phrase embedding shape");
    assert_eq!(z.dim(), (batch, k), "concept target shape");
    let mut out = EmbeddingTerm::zeros(batch, k, d);
    let scale = 1.0 / batch.max(1) as f64;
    let mut degenerate = 0;
    for i in 0..batch {
        let v = visual.index_axis(Axis(0), i);
        let cos = Cosines::new(v, phrase);
        degenerate += usize::from(cos.degenerate());
        // d(loss)/d(cos) for this sample
        let mut d_cos = Array2::<f64>::zeros((k, k));
        for kk in 0..k {
            if z[[i, kk]] == 0.0 {
                continue;
            }
            for other in (0..k).filter(|&o| o != kk) {
                let margin = cos.cos[[kk, other]] - cos.cos[[kk, kk]] + alpha;
                if margin > 0.0 {
                    out.value += z[[i, kk]] * margin * scale;
                    d_cos[[kk, other]] += z[[i, kk]] * scale;
                    d_cos[[kk, kk]] -= z[[i, kk]] * scale;
                }
            }
        }
        let mut gv = out.grad_visual.index_axis_mut(Axis(0), i);
        for ((a, b), &g) in d_cos.indexed_iter() {
            if g != 0.0 {
                let (gx, gy) = (gv.row_mut(a), out.grad_phrase.row_mut(b));
                cos.backprop(a, b, g, v.row(a), phrase.row(b), gx, gy);
            }
        }
    }
    warn_degenerate("semantic triplet loss", degenerate);
    out
}

/// Counter-image triplet loss over the given `(i, i')` pairs: for every
/// concept present in `i` and absent in `i'`,
/// `max(0, cos(v_k^{i'}, s_k) - cos(v_k^i, s_k) + beta)`.
pub fn counter_image_loss(
    visual: ArrayView3<f64>,
    phrase: ArrayView2<f64>,
    z: ArrayView2<f64>,
    pairs: &[(usize, usize)],
    beta: f64,
) -> EmbeddingTerm {
    let (batch, k, d) = visual.dim();
    assert_eq!(phrase.dim(), (k, d), "phrase embedding shape");
    assert_eq!(z.dim(), (batch, k), "concept target shape");
    let mut out = EmbeddingTerm::zeros(batch, k, d);
    let scale = 1.0 / batch.max(1) as f64;
    // Diagonal cosines cos(v_k^i, s_k) per sample.
    let per_sample: Vec<Cosines> = (0..batch)
        .map(|i| Cosines::new(visual.index_axis(Axis(0), i), phrase))
        .collect();
    let degenerate = per_sample.iter().filter(|c| c.degenerate()).count();
    for &(i, j) in pairs {
        for kk in 0..k {
            if z[[i, kk]] - z[[j, kk]] <= 0.0 {
                continue;
            }
            let margin = per_sample[j].cos[[kk, kk]] - per_sample[i].cos[[kk, kk]] + beta;
            if margin <= 0.0 {
                continue;
            }
            out.value += margin * scale;
            for (sample, sign) in [(j, scale), (i, -scale)] {
                let gx = out.grad_visual.slice_mut(s![sample, kk, ..]);
                let gy = out.grad_phrase.row_mut(kk);
                per_sample[sample].backprop(
                    kk,
                    kk,
                    sign,
                    visual.slice(s![sample, kk, ..]),
                    phrase.row(kk),
                    gx,
                    gy,
                );
            }
        }
    }
    warn_degenerate("counter-image loss", degenerate);
    out
}

/// `L_m = L_s + L_d`.
pub fn mapping_loss(
    visual: ArrayView3<f64>,
    phrase: ArrayView2<f64>,
    z: ArrayView2<f64>,
    pairs: &[(usize, usize)],
    alpha: f64,
    beta: f64,
) -> EmbeddingTerm {
    let mut semantic = semantic_triplet_loss(visual, phrase, z, alpha);
    let counter = counter_image_loss(visual, phrase, z, pairs, beta);
    semantic.value += counter.value;
    semantic.grad_visual += &counter.grad_visual;
    semantic.grad_phrase += &counter.grad_phrase;
    semantic
}

/// Soft-Dice coherence between concept maps and lesion targets for present
/// concepts, mean-squared activation suppression for absent ones.
pub fn coherence_loss(
    maps: ArrayView4<f64>,
    targets: ArrayView4<f64>,
    z: ArrayView2<f64>,
    cfg: &LossConfig,
) -> (f64, Array4<f64>) {
    assert_eq!(maps.dim(), targets.dim(), "maps and targets differ in shape");
    let (batch, k, p, q) = maps.dim();
    assert_eq!(z.dim(), (batch, k), "concept target shape");
    let scale = 1.0 / batch.max(1) as f64;
    let cells = (p * q) as f64;
    let mut grad = Array4::zeros(maps.dim());
    let mut value = 0.0;
    for i in 0..batch {
        for kk in 0..k {
            let a = maps.slice(s![i, kk, .., ..]);
            let mut g = grad.slice_mut(s![i, kk, .., ..]);
            if z[[i, kk]] > 0.0 {
                let m = targets.slice(s![i, kk, .., ..]);
                let overlap = 2.0 * (&a * &m).sum();
                let a2 = a.iter().map(|v| v * v).sum::<f64>();
                let m2 = m.iter().map(|v| v * v).sum::<f64>();
                let (denom, d_denom_coeff) = match cfg.dice_denominator {
                    DiceDenominator::Sum => (a2 + m2 + cfg.epsilon, 2.0),
                    DiceDenominator::Product => (a2 * m2 + cfg.epsilon, 2.0 * m2),
                };
                value += (1.0 - overlap / denom) * scale;
                // d/dA [-(N/D)] = -(2M D - N dD/dA) / D^2
                Zip::from(&mut g).and(&a).and(&m).for_each(|g, &av, &mv| {
                    *g = -scale * (2.0 * mv * denom - overlap * d_denom_coeff * av) / (denom * denom);
                });
            } else if cfg.absent_penalty_weight > 0.0 {
                let w = cfg.absent_penalty_weight;
                value += w * a.iter().map(|v| v * v).sum::<f64>() / cells * scale;
                Zip::from(&mut g)
                    .and(&a)
                    .for_each(|g, &av| *g = scale * w * 2.0 * av / cells);
            }
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn uniqueness_at_zero_is_k_ln2() {
        let v = Array2::zeros((1, 8));
        let z = array![[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]];
        let (l, _) = uniqueness_loss(v.view(), z.view());
        assert!((l - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn uniqueness_saturated_correct_is_zero() {
        let v = Array2::from_elem((2, 8), 20.0);
        let z = Array2::ones((2, 8));
        let (l, _) = uniqueness_loss(v.view(), z.view());
        assert!(l < 1e-7 && l >= 0.0);
    }

    #[test]
    fn uniqueness_stable_for_huge_logits() {
        let v = array![[1e4, -1e4]];
        let z = array![[0.0, 1.0]];
        let (l, g) = uniqueness_loss(v.view(), z.view());
        assert!((l - 2e4).abs() < 1e-6);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn triplet_orthonormal_perfect_match_is_zero() {
        let e = Array2::<f64>::eye(4);
        let vis = e.clone().insert_axis(Axis(0));
        let z = Array2::ones((1, 4));
        let t = semantic_triplet_loss(vis.view(), e.view(), z.view(), 1.0);
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn triplet_identical_phrases_gives_alpha_per_pair() {
        let k = 4;
        let phr = Array2::from_shape_fn((k, 3), |(_, j)| [1.0, 2.0, -0.5][j]);
        let vis = Array3::from_shape_fn((1, k, 3), |(_, a, b)| ((a * 3 + b) as f64).sin() + 0.1);
        let z = Array2::ones((1, k));
        let t = semantic_triplet_loss(vis.view(), phr.view(), z.view(), 1.0);
        assert!((t.value - (k * (k - 1)) as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows_do_not_nan() {
        let vis = Array3::zeros((2, 3, 4));
        let phr = Array2::ones((3, 4));
        let z = Array2::ones((2, 3));
        let t = mapping_loss(vis.view(), phr.view(), z.view(), &[(0, 1), (1, 0)], 1.0, 0.5);
        assert!(t.value.is_finite());
        assert!(t.grad_visual.iter().chain(t.grad_phrase.iter()).all(|g| g.is_finite()));
    }

    #[test]
    fn counter_loss_empty_when_concepts_equal() {
        let vis = Array3::from_shape_fn((2, 3, 4), |(i, a, b)| (i + a * b) as f64 + 0.5);
        let phr = Array2::from_shape_fn((3, 4), |(a, b)| (a + b) as f64 - 1.0);
        let z = array![[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]];
        let t = counter_image_loss(vis.view(), phr.view(), z.view(), &[(0, 1), (1, 0)], 0.5);
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn counter_loss_margin_satisfied() {
        // Sample 0 has the concept and is parallel to its phrase; sample 1 lacks
        // it and is orthogonal: max(0, 0 - 1 + 0.5) = 0.
        let phr = array![[1.0, 0.0]];
        let vis = Array3::from_shape_vec((2, 1, 2), vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let z = array![[1.0], [0.0]];
        let t = counter_image_loss(vis.view(), phr.view(), z.view(), &[(0, 1)], 0.5);
        assert_eq!(t.value, 0.0);
        // Swapped geometry violates the margin: 1 - 0 + 0.5 over a batch of 2.
        let vis = Array3::from_shape_vec((2, 1, 2), vec![0.0, 3.0, 2.0, 0.0]).unwrap();
        let t = counter_image_loss(vis.view(), phr.view(), z.view(), &[(0, 1)], 0.5);
        assert!((t.value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn coherence_perfect_overlap_near_zero_and_empty_map_is_one() {
        let cfg = LossConfig::default();
        let m = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| f64::from(u8::from(x + y < 4)));
        let z = array![[1.0]];
        let (l, _) = coherence_loss(m.view(), m.view(), z.view(), &cfg);
        let mass = m.sum();
        assert!((l - (1.0 - 2.0 * mass / (2.0 * mass + cfg.epsilon))).abs() < 1e-12);
        assert!(l < 1e-6);
        let zero = Array4::zeros(m.dim());
        let (l, _) = coherence_loss(zero.view(), m.view(), z.view(), &cfg);
        assert_eq!(l, 1.0);
    }

    #[test]
    fn coherence_absent_concept_penalizes_activation() {
        let cfg = LossConfig::default();
        let a = Array4::from_elem((1, 1, 2, 2), 0.5);
        let t = Array4::zeros((1, 1, 2, 2));
        let (l, g) = coherence_loss(a.view(), t.view(), array![[0.0]].view(), &cfg);
        assert!((l - 0.25).abs() < 1e-12);
        assert!(g.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn coherence_outside_mass_increases_loss() {
        // Two-region map: left half is lesion, right half background.
        let cfg = LossConfig::default();
        let target = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, _, x)| f64::from(u8::from(x < 2)));
        let z = array![[1.0]];
        let mut last = f64::NEG_INFINITY;
        for outside in [0.0, 0.2, 0.5, 1.0, 2.0] {
            let a = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, _, x)| if x < 2 { 1.0 } else { outside });
            let (l, _) = coherence_loss(a.view(), target.view(), z.view(), &cfg);
            assert!(l > last, "loss must grow with outside mass");
            last = l;
        }
    }

    #[test]
    fn product_denominator_differs_from_sum() {
        let m = Array4::from_elem((1, 1, 2, 2), 1.0);
        let z = array![[1.0]];
        let sum = LossConfig::default();
        let product = LossConfig {
            dice_denominator: DiceDenominator::Product,
            ..sum
        };
        let (ls, _) = coherence_loss(m.view(), m.view(), z.view(), &sum);
        let (lp, _) = coherence_loss(m.view(), m.view(), z.view(), &product);
        // sum: 1 - 8/8; product: 1 - 8/16
        assert!(ls.abs() < 1e-6);
        assert!((lp - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_scores() {
        let s = Array2::zeros((3, 2));
        let (l, g) = classification_loss(s.view(), &[0, 1, 1]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let col_sum: Array1<f64> = g.sum_axis(Axis(1));
        assert!(col_sum.iter().all(|v| v.abs() < 1e-12));
    }
}
