//! Loss-term and segmentation ablations. Loss terms are ablated by zeroing
//! their weights, so every variant runs the same code path.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{default_gamma, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{predict, text_table};
use crate::losses::LossConfig;
use crate::model::BackboneRegistry;
use crate::pipeline::{build_model, effective_loss, prepare_splits, PreparedSplits};
use crate::preprocess::PreprocessMode;
use crate::training::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "L_A")]
    A,
    #[serde(rename = "L_A+L_u")]
    AU,
    #[serde(rename = "L_A+L_m")]
    AM,
    #[serde(rename = "L_A+L_c")]
    AC,
    #[serde(rename = "L_A+L_m+L_u")]
    AMU,
    #[serde(rename = "L_A+L_u+L_c")]
    AUC,
    #[serde(rename = "all")]
    All,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [Self::A, Self::AU, Self::AM, Self::AC, Self::AMU, Self::AUC, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "L_A",
            Self::AU => "L_A+L_u",
            Self::AM => "L_A+L_m",
            Self::AC => "L_A+L_c",
            Self::AMU => "L_A+L_m+L_u",
            Self::AUC => "L_A+L_u+L_c",
            Self::All => "all",
        }
    }

    /// `(uses L_u, uses L_m, uses L_c)`
    fn terms(self) -> (bool, bool, bool) {
        match self {
            Self::A => (false, false, false),
            Self::AU => (true, false, false),
            Self::AM => (false, true, false),
            Self::AC => (false, false, true),
            Self::AMU => (true, true, false),
            Self::AUC => (true, false, true),
            Self::All => (true, true, true),
        }
    }

    /// `base` with the weights of the unused terms set to zero.
    pub fn apply(self, base: &LossConfig) -> LossConfig {
        let (u, m, c) = self.terms();
        LossConfig {
            lambda_u: if u { base.lambda_u } else { 0.0 },
            lambda_m: if m { base.lambda_m } else { 0.0 },
            gamma: if c { base.gamma } else { 0.0 },
            ..*base
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant {s:?}")))
    }
}

/// Test-split results of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub accuracy: f64,
    pub concept_f1: f64,
    pub in_mask: Option<f64>,
    pub best_val_accuracy: Option<f64>,
}

fn train_and_score(cfg: &RunConfig, splits: &PreparedSplits, loss: LossConfig, seed: u64, label: &str) -> Result<RunResult> {
    let cfg = RunConfig { seed, ..cfg.clone() };
    let model = build_model(&cfg, &BackboneRegistry::with_defaults())?;
    let opts = TrainOptions {
        loss,
        ..cfg.train_options()
    };
    let outcome = train(model, &splits.train, &splits.val, &opts)?;
    let preds = predict(&outcome.best, &splits.test)?;
    Ok(RunResult {
        label: label.to_string(),
        seed,
        accuracy: preds.accuracy(),
        concept_f1: preds.concept_f1().micro,
        in_mask: preds.in_mask(&splits.test).mean,
        best_val_accuracy: outcome.best_val_accuracy,
    })
}

fn run_grid<T: Sync>(jobs: &[T], parallel: bool, f: impl Fn(&T) -> Result<RunResult> + Sync) -> Result<Vec<RunResult>> {
    if parallel {
        jobs.par_iter().map(&f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAblation {
    pub rows: Vec<RunResult>,
}

impl LossAblation {
    /// Largest minus smallest test accuracy across rows.
    pub fn accuracy_spread(&self) -> f64 {
        let accs = self.rows.iter().map(|r| r.accuracy);
        let max = accs.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn render_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.seed.to_string(),
                    format!("{:.4}", r.accuracy),
                    format!("{:.4}", r.concept_f1),
                    fmt_opt(r.in_mask),
                ]
            })
            .collect();
        text_table(&["variant", "seed", "accuracy", "concept_f1", "in_mask"], &rows)
    }
}

/// Trains every (variant, seed) pair on the same prepared data.
pub fn ablate_losses(
    cfg: &RunConfig,
    splits: &PreparedSplits,
    variants: &[LossVariant],
    seeds: &[u64],
    parallel: bool,
) -> Result<LossAblation> {
    let base = effective_loss(cfg, splits);
    let jobs: Vec<(LossVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = run_grid(&jobs, parallel, |&(v, seed)| train_and_score(cfg, splits, v.apply(&base), seed, v.name()))?;
    Ok(LossAblation { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationAblation {
    pub raw: RunResult,
    pub masked: RunResult,
    pub masked_mode: PreprocessMode,
    /// masked minus raw
    pub accuracy_delta: f64,
    pub in_mask_delta: Option<f64>,
}

impl SegmentationAblation {
    pub fn render_text(&self) -> String {
        let row = |r: &RunResult| {
            vec![
                r.label.clone(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.concept_f1),
                fmt_opt(r.in_mask),
            ]
        };
        let mut rows = vec![row(&self.raw), row(&self.masked)];
        rows.push(vec![
            "delta".into(),
            format!("{:+.4}", self.accuracy_delta),
            "".into(),
            self.in_mask_delta.map_or_else(|| "-".into(), |d| format!("{d:+.4}")),
        ]);
        text_table(&["mode", "accuracy", "concept_f1", "in_mask"], &rows)
    }
}

/// Raw versus masked input on one seed. Each mode uses its own default
/// coherence weight unless the config pins `gamma`.
pub fn ablate_segmentation(cfg: &RunConfig, manifest: &Path, parallel: bool) -> Result<SegmentationAblation> {
    cfg.validate()?;
    let masked_mode = if cfg.preprocess.is_masked() {
        cfg.preprocess
    } else {
        PreprocessMode::ManualOracle
    };
    let modes = [PreprocessMode::Raw, masked_mode];
    let registry = BackboneRegistry::with_defaults();
    let map_dims = build_model(cfg, &registry)?.map_dims();
    let results = run_grid(&modes, parallel, |&mode| {
        let mode_cfg = RunConfig {
            preprocess: mode,
            gamma: Some(cfg.gamma.unwrap_or_else(|| default_gamma(mode))),
            ..cfg.clone()
        };
        let splits = prepare_splits(&mode_cfg, manifest, map_dims)?;
        train_and_score(&mode_cfg, &splits, effective_loss(&mode_cfg, &splits), cfg.seed, mode.as_str())
    })?;
    let (raw, masked) = (results[0].clone(), results[1].clone());
    Ok(SegmentationAblation {
        accuracy_delta: masked.accuracy - raw.accuracy,
        in_mask_delta: masked.in_mask.zip(raw.in_mask).map(|(m, r)| m - r),
        raw,
        masked,
        masked_mode,
    })
}
