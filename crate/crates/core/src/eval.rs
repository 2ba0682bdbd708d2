//! Batch prediction and the evaluation report behind the `eval` command.

use log::warn;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::imageio::resize_bilinear;
use crate::error::{Error, Result};
use crate::losses::sigmoid;
use crate::metrics::{
    argmax, classification_metrics, concept_f1, concept_patch, in_mask_summary, l2_explanation_error,
    mean_pairwise_cosine, pairwise_dsc, presence, ActivationThresholds, AgreementRule, BinaryMapSet,
    ClassificationMetrics, ConceptF1, InMaskSummary, L2Aggregation,
};
use crate::model::ConceptModel;
use crate::preprocess::ModelInput;

/// Evaluation-mode outputs of one model over a set of inputs.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// n x k ground-truth concepts.
    pub truth: Array2<u8>,
    /// n x |C|
    pub scores: Array2<f64>,
    /// n x k
    pub logits: Array2<f64>,
    pub maps: Vec<Array3<f32>>,
}

pub fn predict(model: &ConceptModel, inputs: &[ModelInput]) -> Result<Predictions> {
    let outputs = inputs
        .par_iter()
        .map(|x| model.forward(x.image.view()))
        .collect::<Result<Vec<_>>>()?;
    let n = inputs.len();
    let k = model.num_concepts();
    let c = model.num_classes();
    let scores = Array2::from_shape_fn((n, c), |(i, j)| f64::from(outputs[i].0[j]));
    let logits = Array2::from_shape_fn((n, k), |(i, j)| f64::from(outputs[i].1.logits[j]));
    let truth = Array2::from_shape_fn((n, k), |(i, j)| inputs[i].concepts[j]);
    Ok(Predictions {
        labels: inputs.iter().map(|x| x.label).collect(),
        truth,
        scores,
        logits,
        maps: outputs.into_iter().map(|(_, m)| m.maps).collect(),
    })
}

impl Predictions {
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.scores.outer_iter().map(|r| argmax(&r.to_vec())).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self
            .predicted_labels()
            .iter()
            .zip(&self.labels)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / self.labels.len().max(1) as f64
    }

    pub fn presence(&self) -> Array2<u8> {
        presence(self.logits.view())
    }

    pub fn concept_f1(&self) -> ConceptF1 {
        concept_f1(self.presence().view(), self.truth.view())
    }

    /// In-mask activation fraction of present concepts, over inputs with a region.
    pub fn in_mask(&self, inputs: &[ModelInput]) -> InMaskSummary {
        in_mask_summary(inputs.iter().zip(&self.maps).filter_map(|(x, m)| {
            x.region.as_ref().map(|r| (m.view(), r.view(), x.concepts.as_slice()))
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub map_quantile: f64,
    pub l2_aggregation: L2Aggregation,
    pub agreement: AgreementRule,
    /// Upper bound on patches per concept for the cosine metric.
    pub max_patches: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            map_quantile: 0.7,
            l2_aggregation: L2Aggregation::Sum,
            agreement: AgreementRule::BothCorrect,
            max_patches: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub name: String,
    pub classification: ClassificationMetrics,
    pub concept_f1: ConceptF1,
    pub l2_error: f64,
    pub l2_aggregation: L2Aggregation,
    /// Soft concept maps.
    pub in_mask: InMaskSummary,
    /// Thresholded concept maps.
    pub in_mask_binary: InMaskSummary,
    pub thresholds: ActivationThresholds,
    /// Mean pairwise cosine of concept patches; `None` with fewer than two.
    pub patch_cosine: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscComparison {
    pub model_a: String,
    pub model_b: String,
    pub per_concept: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub concept_names: Vec<String>,
    pub options: EvalOptions,
    pub models: Vec<ModelEvaluation>,
    pub dsc: Vec<DscComparison>,
}

fn patch_cosines(
    model: &ConceptModel,
    inputs: &[ModelInput],
    maps: &BinaryMapSet,
    max_patches: usize,
) -> Vec<Option<f64>> {
    let k = model.num_concepts();
    let size = model.config().input_size;
    (0..k)
        .map(|j| {
            let patches: Vec<Array3<f32>> = inputs
                .iter()
                .enumerate()
                .filter(|(i, x)| maps.presence[[*i, j]] == 1 && x.concepts[j] == 1)
                .filter_map(|(i, x)| concept_patch(x.image.view(), maps.maps[i][j].view()))
                .take(max_patches)
                .collect();
            let vectors: Vec<Vec<f32>> = patches
                .par_iter()
                .map(|p| {
                    let resized = resize_bilinear(p.view(), size);
                    let flat: Vec<f32> = resized.iter().copied().collect();
                    let f = model.backbone_features(&flat);
                    let (nf, fp, fq) = model.feature_dims();
                    f.chunks(fp * fq)
                        .take(nf)
                        .map(|c| c.iter().sum::<f32>() / (fp * fq) as f32)
                        .collect()
                })
                .collect();
            mean_pairwise_cosine(&vectors)
        })
        .collect()
}

fn binary_set(preds: &Predictions, thresholds: &ActivationThresholds) -> BinaryMapSet {
    BinaryMapSet {
        maps: preds.maps.iter().map(|m| thresholds.binarize(m.view())).collect(),
        presence: preds.presence(),
    }
}

/// Evaluates each named model on `test`; map thresholds come from `train`
/// only. With more than one model, pairwise DSC tables are added.
pub fn evaluate(
    models: &[(String, &ConceptModel)],
    train: &[ModelInput],
    test: &[ModelInput],
    split: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let first = models
        .first()
        .ok_or_else(|| Error::Argument("at least one model is required".into()))?
        .1;
    if test.is_empty() {
        return Err(Error::Argument(format!("split {split:?} is empty")));
    }
    if train.is_empty() {
        return Err(Error::Argument("map thresholds need a non-empty train split".into()));
    }
    let concept_names = first.vocab().names().to_vec();
    for (name, m) in models {
        if m.vocab().names() != concept_names.as_slice() {
            return Err(Error::Argument(format!("model {name:?} uses a different concept vocabulary")));
        }
    }

    let mut evaluations = Vec::new();
    let mut binary_sets = Vec::new();
    for (name, model) in models {
        let train_preds = predict(model, train)?;
        let thresholds = ActivationThresholds::fit(&train_preds.maps, opts.map_quantile)?;
        let preds = predict(model, test)?;
        let binary = binary_set(&preds, &thresholds);
        let sigma = preds.logits.mapv(sigmoid);
        let binary_maps: Vec<Array3<f32>> = binary
            .maps
            .iter()
            .map(|per_concept| {
                let (p, q) = per_concept[0].dim();
                Array3::from_shape_fn((per_concept.len(), p, q), |(j, y, x)| f32::from(u8::from(per_concept[j][[y, x]])))
            })
            .collect();
        let in_mask_binary = in_mask_summary(test.iter().zip(&binary_maps).filter_map(|(x, m)| {
            x.region.as_ref().map(|r| (m.view(), r.view(), x.concepts.as_slice()))
        }));
        if test.iter().all(|x| x.region.is_none()) {
            warn!("no lesion masks for split {split:?}; in-mask fractions are undefined");
        }
        evaluations.push(ModelEvaluation {
            name: name.clone(),
            classification: classification_metrics(preds.scores.view(), &preds.labels),
            concept_f1: preds.concept_f1(),
            l2_error: l2_explanation_error(sigma.view(), preds.truth.view(), opts.l2_aggregation),
            l2_aggregation: opts.l2_aggregation,
            in_mask: preds.in_mask(test),
            in_mask_binary,
            patch_cosine: patch_cosines(model, test, &binary, opts.max_patches),
            thresholds,
        });
        binary_sets.push((binary, preds.truth));
    }

    let mut dsc = Vec::new();
    for a in 0..models.len() {
        for b in a + 1..models.len() {
            dsc.push(DscComparison {
                model_a: models[a].0.clone(),
                model_b: models[b].0.clone(),
                per_concept: pairwise_dsc(&binary_sets[a].0, &binary_sets[b].0, binary_sets[a].1.view(), opts.agreement),
            });
        }
    }
    Ok(EvalReport {
        split: split.to_string(),
        n: test.len(),
        concept_names,
        options: opts.clone(),
        models: evaluations,
        dsc,
    })
}

/// Renders rows under a header with every column padded to its widest cell.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let render = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = render(header.to_vec());
    out.push('\n');
    out.push_str(&render(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for row in rows {
        out.push_str(&render(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Summary table plus per-concept tables.
    pub fn render_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .models
            .iter()
            .map(|m| {
                vec![
                    m.name.clone(),
                    format!("{:.4}", m.classification.accuracy),
                    format!("{:.4}", m.classification.sensitivity),
                    format!("{:.4}", m.classification.specificity),
                    fmt_opt(m.classification.auc),
                    format!("{:.4}", m.concept_f1.micro),
                    format!("{:.4}", m.l2_error),
                    fmt_opt(m.in_mask.mean),
                ]
            })
            .collect();
        let mut out = format!("split {} (n = {})\n", self.split, self.n);
        out.push_str(&text_table(
            &["model", "acc", "sens", "spec", "auc", "concept_f1", "l2", "in_mask"],
            &rows,
        ));
        for m in &self.models {
            out.push_str(&format!("\nper-concept ({})\n", m.name));
            let rows: Vec<Vec<String>> = self
                .concept_names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    vec![
                        name.clone(),
                        format!("{:.4}", m.concept_f1.per_concept[j]),
                        format!("{:.4}", m.thresholds.per_concept[j]),
                        fmt_opt(m.patch_cosine[j]),
                    ]
                })
                .collect();
            out.push_str(&text_table(&["concept", "f1", "threshold", "patch_cos"], &rows));
        }
        for d in &self.dsc {
            out.push_str(&format!("\nDSC {} vs {}\n", d.model_a, d.model_b));
            let rows: Vec<Vec<String>> = self
                .concept_names
                .iter()
                .zip(&d.per_concept)
                .map(|(n, v)| vec![n.clone(), fmt_opt(*v)])
                .collect();
            out.push_str(&text_table(&["concept", "dsc"], &rows));
        }
        out
    }
}
