mod common;

use coherent_concepts::metrics::{auc, binary_dsc, classification_metrics, concept_f1, pairwise_dsc, AgreementRule, BinaryMapSet};
use common::suites::auc_instance;
use common::{auc_all_pairs, rng};
use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn auc_equals_all_pairs_count_on_random_instances() {
    let mut r = rng(7);
    for _ in 0..500 {
        let (scores, positive) = auc_instance(&mut r);
        assert_eq!(auc(&scores, &positive), auc_all_pairs(&scores, &positive), "{scores:?} {positive:?}");
    }
}

#[test]
fn auc_on_handcrafted_six_samples() {
    let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1];
    let positive = [true, false, true, true, false, false];
    // Pairs: 9 total; misordered (0.8 neg over 0.4 pos) = 1; tie (0.8, 0.8) = 0.5.
    assert_eq!(auc(&scores, &positive), Some(7.5 / 9.0));
    assert_eq!(auc_all_pairs(&scores, &positive), Some(7.5 / 9.0));
}

#[test]
fn auc_undefined_with_one_class() {
    assert_eq!(auc(&[0.1, 0.5], &[true, true]), None);
}

#[test]
fn classification_rates_by_cell_count() {
    // Rows are (score benign, score melanoma); labels 1 = melanoma.
    let scores = array![[0.1, 0.9], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]];
    let labels = [1, 1, 0, 0];
    let m = classification_metrics(scores.view(), &labels);
    // TP=1, FN=1, FP=1, TN=1.
    assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.5, 0.5, 0.5));
}

#[test]
fn metrics_ignore_sample_order() {
    let mut r = rng(3);
    let scores = Array2::from_shape_fn((30, 2), |_| r.gen_range(-2.0..2.0));
    let labels: Vec<usize> = (0..30).map(|_| r.gen_range(0..2)).collect();
    let pred = Array2::from_shape_fn((30, 4), |_| u8::from(r.gen_bool(0.5)));
    let truth = Array2::from_shape_fn((30, 4), |_| u8::from(r.gen_bool(0.5)));
    let mut order: Vec<usize> = (0..30).collect();
    order.shuffle(&mut r);
    let scores_p = scores.select(ndarray::Axis(0), &order);
    let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    assert_eq!(
        classification_metrics(scores.view(), &labels),
        classification_metrics(scores_p.view(), &labels_p)
    );
    assert_eq!(
        concept_f1(pred.view(), truth.view()),
        concept_f1(pred.select(ndarray::Axis(0), &order).view(), truth.select(ndarray::Axis(0), &order).view())
    );
}

#[test]
fn dsc_anchors() {
    let x = array![[true, true, false], [false, true, false]];
    assert_eq!(binary_dsc(x.view(), x.view()), 1.0);
    assert_eq!(binary_dsc(x.view(), x.mapv(|v| !v).view()), 0.0);
    let a = array![[true, true, false]];
    let b = array![[true, false, false]];
    assert!((binary_dsc(a.view(), b.view()) - 2.0 / 3.0).abs() < 1e-15);
}

fn random_set(r: &mut impl Rng, n: usize, k: usize) -> BinaryMapSet {
    BinaryMapSet {
        maps: (0..n)
            .map(|_| (0..k).map(|_| Array2::from_shape_fn((4, 4), |_| r.gen_bool(0.4))).collect())
            .collect(),
        presence: Array2::from_shape_fn((n, k), |_| u8::from(r.gen_bool(0.7))),
    }
}

#[test]
fn pairwise_dsc_is_symmetric() {
    let mut r = rng(11);
    for _ in 0..20 {
        let a = random_set(&mut r, 6, 3);
        let b = random_set(&mut r, 6, 3);
        let truth = Array2::from_shape_fn((6, 3), |_| u8::from(r.gen_bool(0.7)));
        for rule in [AgreementRule::BothCorrect, AgreementRule::BothPresent] {
            assert_eq!(pairwise_dsc(&a, &b, truth.view(), rule), pairwise_dsc(&b, &a, truth.view(), rule));
        }
    }
}
