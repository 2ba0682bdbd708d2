//! Training objective: classification cross-entropy plus the concept
//! uniqueness, mapping-consistency and coherence regularizers.

mod config;
mod terms;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{DiceDenominator, LossConfig};
pub use terms::{
    classification_loss, coherence_loss, counter_image_loss, mapping_loss, semantic_triplet_loss,
    sigmoid, uniqueness_loss, EmbeddingTerm,
};

/// Every tensor the objective reads for one batch of `B` samples.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// B x |C|
    pub class_scores: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    /// B x k (GAP of the concept maps)
    pub logits: ArrayView2<'a, f64>,
    /// B x k, entries in {0, 1}
    pub concepts: ArrayView2<'a, f64>,
    /// B x k x d_e
    pub visual: ArrayView3<'a, f64>,
    /// k x d_e
    pub phrase: ArrayView2<'a, f64>,
    /// B x k x p x q
    pub maps: ArrayView4<'a, f64>,
    /// B x k x p x q
    pub targets: ArrayView4<'a, f64>,
    /// Counter-image pairs `(i, i')`.
    pub pairs: &'a [(usize, usize)],
}

/// Per-term values; also the per-step log record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_A")]
    pub classification: f64,
    #[serde(rename = "L_u")]
    pub uniqueness: f64,
    #[serde(rename = "L_s")]
    pub semantic: f64,
    #[serde(rename = "L_d")]
    pub counter: f64,
    #[serde(rename = "L_c")]
    pub coherence: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl LossBreakdown {
    pub fn mapping(&self) -> f64 {
        self.semantic + self.counter
    }

    /// Re-sums the weighted objective from the stored terms.
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        self.classification
            + cfg.lambda_u * self.uniqueness
            + cfg.lambda_m * self.mapping()
            + cfg.gamma * self.coherence
    }

    pub fn is_finite(&self) -> bool {
        [
            self.classification,
            self.uniqueness,
            self.semantic,
            self.counter,
            self.coherence,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.classification += weight * other.classification;
        self.uniqueness += weight * other.uniqueness;
        self.semantic += weight * other.semantic;
        self.counter += weight * other.counter;
        self.coherence += weight * other.coherence;
        self.total += weight * other.total;
    }
}

/// Gradient of the weighted total with respect to each input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub class_scores: Array2<f64>,
    pub logits: Array2<f64>,
    pub visual: Array3<f64>,
    pub phrase: Array2<f64>,
    pub maps: Array4<f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: LossGrads,
}

/// `L = L_A + lambda_u L_u + lambda_m (L_s + L_d) + gamma L_c`.
pub fn total_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> LossOutput {
    let (l_a, g_scores) = classification_loss(inputs.class_scores, inputs.labels);
    let (l_u, g_logits) = uniqueness_loss(inputs.logits, inputs.concepts);
    let semantic = semantic_triplet_loss(inputs.visual, inputs.phrase, inputs.concepts, cfg.alpha);
    let counter = counter_image_loss(
        inputs.visual,
        inputs.phrase,
        inputs.concepts,
        inputs.pairs,
        cfg.beta,
    );
    let (l_c, g_maps) = coherence_loss(inputs.maps, inputs.targets, inputs.concepts, cfg);

    let mut breakdown = LossBreakdown {
        classification: l_a,
        uniqueness: l_u,
        semantic: semantic.value,
        counter: counter.value,
        coherence: l_c,
        total: 0.0,
    };
    breakdown.total = breakdown.recombine(cfg);

    let grads = LossGrads {
        class_scores: g_scores,
        logits: g_logits * cfg.lambda_u,
        visual: (semantic.grad_visual + &counter.grad_visual) * cfg.lambda_m,
        phrase: (semantic.grad_phrase + &counter.grad_phrase) * cfg.lambda_m,
        maps: g_maps * cfg.gamma,
    };
    LossOutput { breakdown, grads }
}

/// Counter-image pairing: shuffle the batch into a ring and pair each sample
/// with its successor. Batches of one have no pairs.
pub fn ring_pairs<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if batch < 2 {
        return Vec::new();
    }
    let mut ring: Vec<usize> = (0..batch).collect();
    ring.shuffle(rng);
    (0..batch)
        .map(|j| (ring[j], ring[(j + 1) % batch]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_covers_every_sample_once_each_way() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = ring_pairs(6, &mut rng);
        assert_eq!(pairs.len(), 6);
        let mut firsts: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut seconds: Vec<_> = pairs.iter().map(|p| p.1).collect();
        firsts.sort();
        seconds.sort();
        assert_eq!(firsts, (0..6).collect::<Vec<_>>());
        assert_eq!(seconds, (0..6).collect::<Vec<_>>());
        assert!(pairs.iter().all(|(a, b)| a != b));
        assert!(ring_pairs(1, &mut rng).is_empty());
    }

    #[test]
    fn affine_combination() {
        let b = LossBreakdown {
            classification: 1.5,
            uniqueness: 2.0,
            semantic: 0.75,
            counter: 0.25,
            coherence: 4.0,
            total: 0.0,
        };
        let cfg = LossConfig {
            gamma: 0.25,
            ..LossConfig::default().with_lambda(0.4)
        };
        // a + 0.4 (b + c) + 0.25 d with c = L_s + L_d
        assert!((b.recombine(&cfg) - (1.5 + 0.4 * (2.0 + 1.0) + 0.25 * 4.0)).abs() < 1e-15);
    }
}
