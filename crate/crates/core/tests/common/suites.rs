//! Gradient and oracle checks over every loss term, shared by the loss
//! tests and the acceptance report.

use coherent_concepts::losses::{
    classification_loss, coherence_loss, counter_image_loss, mapping_loss, semantic_triplet_loss, total_loss,
    uniqueness_loss, DiceDenominator, LossConfig, LossInputs,
};
use coherent_concepts::explain::predict_label;
use coherent_concepts::metrics::argmax;
use coherent_concepts::model::{load_phrase_embeddings, BackboneOptions, BackboneRegistry, ConceptModel, ModelConfig, ParamGroup};
use coherent_concepts::ConceptVocabulary;
use ndarray::{Array, Array3, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{instance, max_relative_error, numeric_grad, rng, Instance};

pub const GRADIENT_INSTANCES: u64 = 20;
pub const ORACLE_INSTANCES: u64 = 100;
const H: f64 = 1e-5;
/// Gradient entries smaller than this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-4;

/// The gradient-suite shape: batch 4, k = 3, 4 x 4 maps, d_e = 5.
pub fn gradient_instance(seed: u64) -> Instance {
    instance(&mut rng(seed), 4, 3, 4, 4, 5)
}

/// Random shapes for the oracle comparisons.
pub fn oracle_instance(seed: u64) -> Instance {
    let mut r = rng(1000 + seed);
    let batch = r.gen_range(2..7);
    let k = r.gen_range(2..6);
    let p = r.gen_range(2..6);
    let d = r.gen_range(2..8);
    instance(&mut r, batch, k, p, p + 1, d)
}

fn with_values<D: Dimension>(like: &Array<f64, D>, values: &[f64]) -> Array<f64, D> {
    Array::from_shape_vec(like.raw_dim(), values.to_vec()).unwrap()
}

fn flat<D: Dimension>(a: &Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn error<D: Dimension>(x: &Array<f64, D>, analytic: &Array<f64, D>, f: impl FnMut(&[f64]) -> f64) -> f64 {
    let numeric = numeric_grad(&flat(x), H, f);
    max_relative_error(&flat(analytic), &numeric, GRAD_FLOOR)
}

pub fn dice(denominator: DiceDenominator) -> LossConfig {
    LossConfig {
        dice_denominator: denominator,
        ..LossConfig::default()
    }
}

pub fn inputs(t: &Instance) -> LossInputs<'_> {
    LossInputs {
        class_scores: t.scores.view(),
        labels: &t.labels,
        logits: t.logits.view(),
        concepts: t.z.view(),
        visual: t.visual.view(),
        phrase: t.phrase.view(),
        maps: t.maps.view(),
        targets: t.targets.view(),
        pairs: &t.pairs,
    }
}

fn total_of(t: &Instance, c: &LossConfig) -> f64 {
    total_loss(&inputs(t), c).breakdown.total
}

/// Largest relative gradient error of each term on one instance.
pub fn gradient_errors(t: &Instance) -> Vec<(&'static str, f64)> {
    let (alpha, beta) = (1.0, 0.5);
    let mut out = Vec::new();

    let (_, g) = uniqueness_loss(t.logits.view(), t.z.view());
    out.push(("L_u", error(&t.logits, &g, |x| uniqueness_loss(with_values(&t.logits, x).view(), t.z.view()).0)));

    let s = semantic_triplet_loss(t.visual.view(), t.phrase.view(), t.z.view(), alpha);
    let sv = error(&t.visual, &s.grad_visual, |x| {
        semantic_triplet_loss(with_values(&t.visual, x).view(), t.phrase.view(), t.z.view(), alpha).value
    });
    let sp = error(&t.phrase, &s.grad_phrase, |x| {
        semantic_triplet_loss(t.visual.view(), with_values(&t.phrase, x).view(), t.z.view(), alpha).value
    });
    out.push(("L_s", sv.max(sp)));

    let d = counter_image_loss(t.visual.view(), t.phrase.view(), t.z.view(), &t.pairs, beta);
    let dv = error(&t.visual, &d.grad_visual, |x| {
        counter_image_loss(with_values(&t.visual, x).view(), t.phrase.view(), t.z.view(), &t.pairs, beta).value
    });
    let dp = error(&t.phrase, &d.grad_phrase, |x| {
        counter_image_loss(t.visual.view(), with_values(&t.phrase, x).view(), t.z.view(), &t.pairs, beta).value
    });
    out.push(("L_d", dv.max(dp)));

    for (name, denominator) in [("L_c (sum)", DiceDenominator::Sum), ("L_c (product)", DiceDenominator::Product)] {
        let c = dice(denominator);
        let (_, g) = coherence_loss(t.maps.view(), t.targets.view(), t.z.view(), &c);
        out.push((name, error(&t.maps, &g, |x| {
            coherence_loss(with_values(&t.maps, x).view(), t.targets.view(), t.z.view(), &c).0
        })));
    }

    let c = LossConfig::default();
    let g = total_loss(&inputs(t), &c).grads;
    let parts = [
        error(&t.scores, &g.class_scores, |x| total_of(&Instance { scores: with_values(&t.scores, x), ..t.clone() }, &c)),
        error(&t.logits, &g.logits, |x| total_of(&Instance { logits: with_values(&t.logits, x), ..t.clone() }, &c)),
        error(&t.visual, &g.visual, |x| total_of(&Instance { visual: with_values(&t.visual, x), ..t.clone() }, &c)),
        error(&t.phrase, &g.phrase, |x| total_of(&Instance { phrase: with_values(&t.phrase, x), ..t.clone() }, &c)),
        error(&t.maps, &g.maps, |x| total_of(&Instance { maps: with_values(&t.maps, x), ..t.clone() }, &c)),
    ];
    out.push(("L_total", parts.into_iter().fold(0.0, f64::max)));
    out
}

/// Absolute deviation of each vectorized term from its scalar-loop oracle.
pub fn oracle_deviations(t: &Instance) -> Vec<(&'static str, f64)> {
    let (alpha, beta) = (1.0, 0.5);
    let mut out = Vec::new();
    let (a, _) = classification_loss(t.scores.view(), &t.labels);
    out.push(("L_A", (a - super::cross_entropy(&t.scores, &t.labels)).abs()));
    let (u, _) = uniqueness_loss(t.logits.view(), t.z.view());
    out.push(("L_u", (u - super::bce(&t.logits, &t.z)).abs()));
    let s = semantic_triplet_loss(t.visual.view(), t.phrase.view(), t.z.view(), alpha).value;
    let s_oracle = super::triplet(&t.visual, &t.phrase, &t.z, alpha);
    out.push(("L_s", (s - s_oracle).abs()));
    let d = counter_image_loss(t.visual.view(), t.phrase.view(), t.z.view(), &t.pairs, beta).value;
    let d_oracle = super::counter(&t.visual, &t.phrase, &t.z, &t.pairs, beta);
    out.push(("L_d", (d - d_oracle).abs()));
    let m = mapping_loss(t.visual.view(), t.phrase.view(), t.z.view(), &t.pairs, alpha, beta).value;
    out.push(("L_m", (m - (s_oracle + d_oracle)).abs()));
    for (name, denominator) in [("L_c (sum)", DiceDenominator::Sum), ("L_c (product)", DiceDenominator::Product)] {
        let c = dice(denominator);
        let (v, _) = coherence_loss(t.maps.view(), t.targets.view(), t.z.view(), &c);
        let want = super::coherence(
            &t.maps,
            &t.targets,
            &t.z,
            c.epsilon,
            denominator == DiceDenominator::Product,
            c.absent_penalty_weight,
        );
        out.push((name, (v - want).abs()));
    }
    let c = LossConfig {
        lambda_u: 0.3,
        lambda_m: 0.7,
        ..LossConfig::default()
    };
    let total = total_loss(&inputs(t), &c).breakdown.total;
    let want = super::cross_entropy(&t.scores, &t.labels)
        + 0.3 * super::bce(&t.logits, &t.z)
        + 0.7 * (super::triplet(&t.visual, &t.phrase, &t.z, c.alpha) + super::counter(&t.visual, &t.phrase, &t.z, &t.pairs, c.beta))
        + c.gamma * super::coherence(&t.maps, &t.targets, &t.z, c.epsilon, false, c.absent_penalty_weight);
    out.push(("L_total", (total - want).abs()));
    out
}

/// Worst value per term over instances `0..n` of `make`.
pub fn worst(n: u64, make: impl Fn(u64) -> Instance, measure: impl Fn(&Instance) -> Vec<(&'static str, f64)>) -> Vec<(&'static str, f64)> {
    let mut acc: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..n {
        for (i, (name, v)) in measure(&make(seed)).into_iter().enumerate() {
            let v = if v.is_nan() { f64::INFINITY } else { v };
            if acc.len() <= i {
                acc.push((name, v));
            } else {
                acc[i].1 = acc[i].1.max(v);
            }
        }
    }
    acc
}

/// Coarse scores (ties are common) with random labels, `n` in `2..=50`.
pub fn auc_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.gen_range(2..=50);
    let levels = r.gen_range(2..12);
    let scores = (0..n).map(|_| f64::from(r.gen_range(0..levels)) / levels as f64).collect();
    let positive = (0..n).map(|_| r.gen_bool(0.4)).collect();
    (scores, positive)
}

/// A 32 x 32 model with a randomized classifier so both classes occur.
pub fn small_model(seed: u64) -> ConceptModel {
    let vocab = ConceptVocabulary::default();
    let phrases = load_phrase_embeddings("random:5", &vocab, 16).unwrap();
    let config = ModelConfig {
        input_size: (32, 32),
        embed_dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = ConceptModel::build(
        config,
        vocab,
        phrases,
        &BackboneRegistry::with_defaults(),
        &BackboneOptions { seed, weights: None },
        seed,
    )
    .unwrap();
    let mut r = rng(seed);
    for w in model.group_mut(ParamGroup::Classifier) {
        *w = r.gen_range(-2.0..2.0);
    }
    model
}

/// How many of `cases` random images get the same label from
/// `predict_label` on the concept logits as from the forward-pass argmax.
pub fn predict_label_agreement(cases: u64) -> u64 {
    let mut r = rng(9);
    let mut agree = 0;
    for case in 0..cases {
        let model = small_model(case % 5);
        let image = Array3::from_shape_fn((3, 32, 32), |_| r.gen_range(0.0f32..1.0));
        let (scores, concepts) = model.forward(image.view()).unwrap();
        let scores: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
        let logits = concepts.logits.mapv(f64::from);
        let w = model.classifier_weights().mapv(f64::from);
        let b = model.classifier_bias().mapv(f64::from);
        agree += u64::from(predict_label(logits.view(), w.view(), Some(b.view())) == argmax(&scores));
    }
    agree
}
