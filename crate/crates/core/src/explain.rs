//! Per-image explanations: concept presence, softmax contributions of
//! `v_k W[c, k]`, a templated sentence and concept-map overlays.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataset::imageio::{resize_bilinear, save_rgb};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::ConceptModel;
use crate::vocab::ConceptVocabulary;

/// Contributions below this share are treated as null in the text.
pub const DEFAULT_CONTRIBUTION_THRESHOLD: f64 = 0.01;
pub const OVERLAY_ALPHA: f32 = 0.5;
pub const NO_SUPPORT: &str = "no supporting concepts identified";

/// Present iff `v_k > 0`; a tie at zero counts as absent.
pub fn concept_presence(logits: ArrayView1<f64>) -> Vec<u8> {
    logits.iter().map(|&v| u8::from(v > 0.0)).collect()
}

/// Softmax over `v_k W[class, k]`; the classifier bias takes no part.
pub fn contributions(logits: ArrayView1<f64>, weights: ArrayView2<f64>, class: usize) -> Vec<f64> {
    let products: Vec<f64> = logits
        .iter()
        .zip(weights.row(class))
        .map(|(v, w)| v * w)
        .collect();
    let max = products.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = products.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `argmax_c (W v + b)_c`.
pub fn predict_label(logits: ArrayView1<f64>, weights: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> usize {
    let mut scores = weights.dot(&logits);
    if let Some(b) = bias {
        scores += &b;
    }
    argmax(scores.as_slice().expect("contiguous scores"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub predicted_label: usize,
    pub label_name: String,
    pub class_scores: Vec<f64>,
    pub concept_names: Vec<String>,
    pub logits: Vec<f64>,
    pub concept_presence: Vec<u8>,
    pub contributions: Vec<f64>,
    pub contribution_threshold: f64,
    pub text: String,
    pub overlay_paths: Vec<PathBuf>,
}

/// Concepts that are present and carry at least `threshold` of the
/// contribution mass, in descending order of contribution.
pub fn supporting_concepts(presence: &[u8], contributions: &[f64], threshold: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..presence.len())
        .filter(|&j| presence[j] == 1 && contributions[j] > 0.0 && contributions[j] >= threshold)
        .collect();
    idx.sort_by(|&a, &b| contributions[b].total_cmp(&contributions[a]).then(a.cmp(&b)));
    idx
}

pub fn render_text(
    label_name: &str,
    presence: &[u8],
    contributions: &[f64],
    vocab: &ConceptVocabulary,
    threshold: f64,
) -> String {
    let support = supporting_concepts(presence, contributions, threshold);
    if support.is_empty() {
        return format!("Classified as {label_name}: {NO_SUPPORT}.");
    }
    let parts: Vec<String> = support
        .iter()
        .map(|&j| format!("{} ({:.1}%)", vocab.display_phrase(j), contributions[j] * 100.0))
        .collect();
    format!("Classified as {label_name} because {}.", parts.join(", "))
}

fn class_name(class_names: &[String], c: usize) -> String {
    class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
}

/// Explains one network input (already preprocessed). Overlays are not
/// written; see [`export_overlays`].
pub fn explain(
    model: &ConceptModel,
    image: ArrayView3<f32>,
    class_names: &[String],
    threshold: f64,
) -> Result<(ExplanationReport, Array3<f32>)> {
    let (scores, concepts) = model.forward(image)?;
    let logits = concepts.logits.mapv(f64::from);
    let weights = model.classifier_weights().mapv(f64::from);
    let bias = model.classifier_bias().mapv(f64::from);
    let scores: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
    let predicted = argmax(&scores);
    let presence = concept_presence(logits.view());
    let contrib = contributions(logits.view(), weights.view(), predicted);
    let label_name = class_name(class_names, predicted);
    let text = render_text(&label_name, &presence, &contrib, model.vocab(), threshold);
    debug_assert_eq!(predict_label(logits.view(), weights.view(), Some(bias.view())), predicted);
    Ok((
        ExplanationReport {
            predicted_label: predicted,
            label_name,
            class_scores: scores,
            concept_names: model.vocab().names().to_vec(),
            logits: logits.to_vec(),
            concept_presence: presence,
            contributions: contrib,
            contribution_threshold: threshold,
            text,
            overlay_paths: Vec::new(),
        },
        concepts.maps,
    ))
}

/// Jet colormap on [0, 1].
pub fn colormap(t: f32) -> [f32; 3] {
    let ch = |offset: f32| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Min-max normalized map, upsampled and alpha-blended over the image. An
/// all-zero map leaves the image unchanged; any other constant map
/// normalizes to zero and yields a uniform tint.
pub fn overlay(image: ArrayView3<f32>, map: ArrayView2<f32>) -> Array3<f32> {
    if map.iter().all(|&v| v == 0.0) {
        return image.to_owned();
    }
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let norm: Array2<f32> = if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(map.dim())
    };
    let (_, h, w) = image.dim();
    let up = resize_bilinear(norm.insert_axis(ndarray::Axis(0)).view(), (h, w));
    let mut out = image.to_owned();
    for y in 0..h {
        for x in 0..w {
            let color = colormap(up[[0, y, x]]);
            for (c, &col) in color.iter().enumerate() {
                out[[c, y, x]] = (1.0 - OVERLAY_ALPHA) * image[[c, y, x]] + OVERLAY_ALPHA * col;
            }
        }
    }
    out
}

/// Writes one PNG overlay per concept and returns the paths in concept order.
pub fn export_overlays(
    image: ArrayView3<f32>,
    maps: ArrayView3<f32>,
    names: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if maps.dim().0 != names.len() {
        return Err(Error::Argument(format!(
            "{} maps for {} concept names",
            maps.dim().0,
            names.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    maps.outer_iter()
        .zip(names)
        .enumerate()
        .map(|(j, (m, name))| {
            let path = out_dir.join(format!("overlay_{j}_{name}.png"));
            save_rgb(&path, overlay(image, m).view())?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn presence_sign_rule() {
        assert_eq!(concept_presence(array![-1.0, 2.0, 0.0].view()), vec![0, 1, 0]);
        assert_eq!(concept_presence(array![-1.0, -0.1].view()), vec![0, 0]);
    }

    #[test]
    fn equal_products_give_uniform_contributions() {
        let v = Array1::from_elem(8, 1.0);
        let w = Array2::from_elem((2, 8), 0.3);
        let c = contributions(v.view(), w.view(), 1);
        assert!(c.iter().all(|&x| (x - 0.125).abs() < 1e-12));
    }

    #[test]
    fn dominant_product_saturates() {
        let v = array![20.0, 0.0, 0.0];
        let w = array![[1.0, 1.0, 1.0]];
        let c = contributions(v.view(), w.view(), 0);
        assert!(c[0] > 1.0 - 1e-8);
    }

    #[test]
    fn label_argmax_and_scale_invariance() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![3.0, 1.0];
        assert_eq!(predict_label(v.view(), w.view(), None), 0);
        assert_eq!(predict_label((&v * 2.0).view(), w.view(), None), 0);
    }

    #[test]
    fn text_orders_by_contribution_and_drops_null() {
        let vocab = ConceptVocabulary::default();
        let presence = [1, 0, 1, 0, 0, 1, 0, 0];
        let contrib = [0.7, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
        let text = render_text("melanoma", &presence, &contrib, &vocab, DEFAULT_CONTRIBUTION_THRESHOLD);
        assert_eq!(
            text,
            "Classified as melanoma because Atypical Pigment Network (70.0%), Blue Whitish Veil (30.0%)."
        );
        assert!(!text.contains("Globules"));
    }

    #[test]
    fn fallback_sentence() {
        let vocab = ConceptVocabulary::default();
        let text = render_text("nevus", &[0; 8], &[0.125; 8], &vocab, DEFAULT_CONTRIBUTION_THRESHOLD);
        assert!(text.contains(NO_SUPPORT));
    }

    #[test]
    fn overlay_edge_cases() {
        let img = Array3::from_elem((3, 8, 8), 0.4f32);
        assert_eq!(overlay(img.view(), Array2::zeros((2, 2)).view()), img);
        let tinted = overlay(img.view(), Array2::from_elem((2, 2), 0.7).view());
        let c0 = colormap(0.0);
        for c in 0..3 {
            let expected = 0.5 * 0.4 + 0.5 * c0[c];
            assert!(tinted.index_axis(ndarray::Axis(0), c).iter().all(|&v| (v - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn export_writes_one_file_per_concept() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_elem((3, 16, 16), 0.2f32);
        let maps = Array3::from_shape_fn((3, 4, 4), |(k, y, x)| (k * y * x) as f32);
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let paths = export_overlays(img.view(), maps.view(), &names, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
    }
}
