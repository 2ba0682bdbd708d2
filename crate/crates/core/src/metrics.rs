//! Evaluation measures: classification rates and AUC, concept F1, L2
//! explanation error, thresholded concept maps with pairwise DSC, concept
//! patch cosine similarity, and in-mask activation fraction.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the class treated as positive (melanoma) for sensitivity,
/// specificity and AUC.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn softmax_prob(row: &[f64], class: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (row[class] - max).exp() / z
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rates at the argmax decision; AUC ranks samples by the softmax
/// probability of [`POSITIVE_CLASS`].
pub fn classification_metrics(scores: ArrayView2<f64>, labels: &[usize]) -> ClassificationMetrics {
    assert_eq!(scores.nrows(), labels.len());
    let n = labels.len();
    let (mut tp, mut tn, mut fp, mut fneg, mut correct) = (0, 0, 0, 0, 0);
    let mut ranking = Vec::with_capacity(n);
    for (row, &y) in scores.outer_iter().zip(labels) {
        let row = row.to_vec();
        let pred = argmax(&row);
        correct += usize::from(pred == y);
        match (y == POSITIVE_CLASS, pred == POSITIVE_CLASS) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
        let pos_score = if row.len() > POSITIVE_CLASS {
            softmax_prob(&row, POSITIVE_CLASS)
        } else {
            0.0
        };
        ranking.push(pos_score);
    }
    let positives: Vec<bool> = labels.iter().map(|&y| y == POSITIVE_CLASS).collect();
    ClassificationMetrics {
        n,
        accuracy: ratio(correct, n),
        sensitivity: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
        auc: auc(&ranking, &positives),
    }
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&s| positives[s]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptF1 {
    pub micro: f64,
    pub per_concept: Vec<f64>,
}

fn f1(tp: usize, fp: usize, fneg: usize) -> Option<f64> {
    let den = 2 * tp + fp + fneg;
    (den > 0 && tp + fneg > 0).then(|| 2.0 * tp as f64 / den as f64)
}

/// Micro-averaged F1 over all (sample, concept) cells, plus per-concept F1.
/// F1 is 0 (with a warning) wherever the truth has no positives.
pub fn concept_f1(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> ConceptF1 {
    assert_eq!(pred.dim(), truth.dim());
    let k = pred.ncols();
    let mut counts = vec![(0usize, 0usize, 0usize); k];
    for (prow, trow) in pred.outer_iter().zip(truth.outer_iter()) {
        for j in 0..k {
            let c = &mut counts[j];
            match (prow[j] != 0, trow[j] != 0) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_concept = counts
        .iter()
        .enumerate()
        .map(|(j, &(tp, fp, fneg))| {
            f1(tp, fp, fneg).unwrap_or_else(|| {
                warn!("concept {j} has no positives in the evaluation set; F1 reported as 0");
                0.0
            })
        })
        .collect();
    let (tp, fp, fneg) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    let micro = f1(tp, fp, fneg).unwrap_or_else(|| {
        warn!("no positive concepts in the evaluation set; micro F1 reported as 0");
        0.0
    });
    ConceptF1 { micro, per_concept }
}

/// Concept presence decision: present iff the logit is strictly positive.
pub fn presence(logits: ArrayView2<f64>) -> Array2<u8> {
    logits.mapv(|v| u8::from(v > 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Aggregation {
    #[default]
    Sum,
    Mean,
}

impl FromStr for L2Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("l2 aggregation must be sum or mean, got {other:?}"))),
        }
    }
}

impl fmt::Display for L2Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

/// Per-sample Euclidean distance between predicted concept scores and the
/// truth vector, aggregated over samples.
pub fn l2_explanation_error(pred: ArrayView2<f64>, truth: ArrayView2<u8>, agg: L2Aggregation) -> f64 {
    assert_eq!(pred.dim(), truth.dim());
    let total: f64 = pred
        .outer_iter()
        .zip(truth.outer_iter())
        .map(|(p, t)| {
            p.iter()
                .zip(t.iter())
                .map(|(&a, &b)| (a - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    match agg {
        L2Aggregation::Sum => total,
        L2Aggregation::Mean if pred.nrows() > 0 => total / pred.nrows() as f64,
        L2Aggregation::Mean => 0.0,
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    f64::from(sorted[lo]) * (1.0 - frac) + f64::from(sorted[hi]) * frac
}

/// Per-concept activation thresholds, fit on training-split maps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationThresholds {
    pub quantile: f64,
    pub per_concept: Vec<f64>,
}

impl ActivationThresholds {
    /// `maps` are k x p x q per training sample.
    pub fn fit(maps: &[Array3<f32>], quantile: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&quantile) {
            return Err(Error::Config(format!("map quantile must lie in [0, 1), got {quantile}")));
        }
        let k = maps
            .first()
            .map(|m| m.dim().0)
            .ok_or_else(|| Error::Argument("no training maps to fit thresholds on".into()))?;
        let per_concept = (0..k)
            .map(|j| {
                let mut pooled: Vec<f32> = maps
                    .iter()
                    .flat_map(|m| m.index_axis(Axis(0), j).iter().copied().collect::<Vec<_>>())
                    .collect();
                pooled.sort_by(f32::total_cmp);
                if pooled.iter().all(|&v| v == 0.0) {
                    warn!("concept {j} never activates on the training split; its binary maps are empty");
                }
                quantile_sorted(&pooled, quantile)
            })
            .collect();
        Ok(Self { quantile, per_concept })
    }

    /// Cells strictly above the concept's threshold.
    pub fn binarize(&self, maps: ArrayView3<f32>) -> Vec<Array2<bool>> {
        maps.outer_iter()
            .zip(&self.per_concept)
            .map(|(m, &t)| m.mapv(|v| f64::from(v) > t))
            .collect()
    }
}

/// `2|X n Y| / (|X| + |Y|)`; two empty maps count as identical.
pub fn binary_dsc(x: ArrayView2<bool>, y: ArrayView2<bool>) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in x.iter().zip(y.iter()) {
        inter += usize::from(a && b);
        total += usize::from(a) + usize::from(b);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Which samples count towards a concept's cross-model DSC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgreementRule {
    /// Both models predict the concept present and the truth agrees.
    #[default]
    BothCorrect,
    /// Both models predict the concept present.
    BothPresent,
}

impl FromStr for AgreementRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both-correct" => Ok(Self::BothCorrect),
            "both-present" => Ok(Self::BothPresent),
            other => Err(Error::Config(format!("unknown agreement rule {other:?}"))),
        }
    }
}

impl fmt::Display for AgreementRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BothCorrect => "both-correct",
            Self::BothPresent => "both-present",
        })
    }
}

/// Binary maps and presence predictions of one model over an evaluation set.
#[derive(Debug, Clone)]
pub struct BinaryMapSet {
    /// `maps[i][k]` is sample i, concept k.
    pub maps: Vec<Vec<Array2<bool>>>,
    /// n x k presence predictions.
    pub presence: Array2<u8>,
}

/// Mean DSC per concept over qualifying samples; `None` when no sample
/// qualifies.
pub fn pairwise_dsc(a: &BinaryMapSet, b: &BinaryMapSet, truth: ArrayView2<u8>, rule: AgreementRule) -> Vec<Option<f64>> {
    let (n, k) = truth.dim();
    (0..k)
        .map(|j| {
            let scores: Vec<f64> = (0..n)
                .filter(|&i| {
                    let both = a.presence[[i, j]] == 1 && b.presence[[i, j]] == 1;
                    match rule {
                        AgreementRule::BothPresent => both,
                        AgreementRule::BothCorrect => both && truth[[i, j]] == 1,
                    }
                })
                .map(|i| binary_dsc(a.maps[i][j].view(), b.maps[i][j].view()))
                .collect();
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// Inclusive `(row0, col0, row1, col1)` bounding box of the largest
/// 4-connected component, ties going to the component found first in
/// row-major order.
pub fn largest_component_bbox(map: ArrayView2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = map.dim();
    let mut seen = Array2::<bool>::default((h, w));
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    for r in 0..h {
        for c in 0..w {
            if !map[[r, c]] || seen[[r, c]] {
                continue;
            }
            let mut size = 0;
            let mut bbox = (r, c, r, c);
            let mut queue = VecDeque::from([(r, c)]);
            seen[[r, c]] = true;
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                bbox = (bbox.0.min(y), bbox.1.min(x), bbox.2.max(y), bbox.3.max(x));
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && map[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if best.map_or(true, |(s, _)| size > s) {
                best = Some((size, bbox));
            }
        }
    }
    best.map(|(_, b)| b)
}

/// Crops the image region under the largest component of a p x q binary map.
pub fn concept_patch(image: ArrayView3<f32>, map: ArrayView2<bool>) -> Option<Array3<f32>> {
    let (r0, c0, r1, c1) = largest_component_bbox(map)?;
    let (_, h, w) = image.dim();
    let (p, q) = map.dim();
    let y0 = r0 * h / p;
    let y1 = ((r1 + 1) * h).div_ceil(p).min(h);
    let x0 = c0 * w / q;
    let x1 = ((c1 + 1) * w).div_ceil(q).min(w);
    Some(image.slice(ndarray::s![.., y0..y1, x0..x1]).to_owned())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine over all unordered pairs; `None` with fewer than two vectors.
pub fn mean_pairwise_cosine(vectors: &[Vec<f32>]) -> Option<f64> {
    if vectors.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            sum += cosine(&vectors[i], &vectors[j]);
            count += 1;
        }
    }
    Some(sum / count as f64)
}

/// Share of activation mass inside the region: `sum(A M) / sum(A)`.
/// `None` when the map carries no activation.
pub fn in_mask_fraction(map: ArrayView2<f32>, region: ArrayView2<f64>) -> Option<f64> {
    let total: f64 = map.iter().map(|&a| f64::from(a)).sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = map.iter().zip(region.iter()).map(|(&a, &m)| f64::from(a) * m).sum();
    Some(inside / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InMaskSummary {
    /// Mean over (sample, present concept) pairs with nonzero activation.
    pub mean: Option<f64>,
    pub counted: usize,
    /// Present concepts whose map was entirely zero.
    pub inactive: usize,
}

/// In-mask fraction averaged over every present concept of every sample
/// that has a region.
pub fn in_mask_summary<'a, I>(items: I) -> InMaskSummary
where
    I: IntoIterator<Item = (ArrayView3<'a, f32>, ArrayView2<'a, f64>, &'a [u8])>,
{
    let (mut sum, mut counted, mut inactive) = (0.0, 0usize, 0usize);
    for (maps, region, z) in items {
        for (m, &present) in maps.outer_iter().zip(z) {
            if present == 0 {
                continue;
            }
            match in_mask_fraction(m, region) {
                Some(f) => {
                    sum += f;
                    counted += 1;
                }
                None => inactive += 1,
            }
        }
    }
    InMaskSummary {
        mean: (counted > 0).then(|| sum / counted as f64),
        counted,
        inactive,
    }
}
