//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown keys are rejected, and [`RunConfig::render`] writes a file
//! that parses back to an identical configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{LabelMap, LoadOptions};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::explain::DEFAULT_CONTRIBUTION_THRESHOLD;
use crate::losses::{DiceDenominator, LossConfig};
use crate::metrics::{AgreementRule, L2Aggregation};
use crate::model::{BackboneOptions, GroupMask, ModelConfig, ParamGroup};
use crate::preprocess::{PreprocessMode, SegmenterOptions};
use crate::training::{StageSchedule, StageSpec, TrainOptions};
use crate::vocab::{ConceptVocabulary, DEFAULT_CONCEPTS};

/// Coherence weight used when `gamma = auto`.
pub fn default_gamma(mode: PreprocessMode) -> f64 {
    if mode.is_masked() {
        0.25
    } else {
        0.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub preprocess: PreprocessMode,
    pub external_mask_dir: Option<PathBuf>,
    pub image_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub label_map: Option<LabelMap>,
    /// `NAME:phrase` pairs; the default is the eight dermoscopic criteria.
    pub concepts: Vec<(String, String)>,
    pub phrase_vectors: String,
    pub phrase_dim: usize,
    pub backbone: String,
    pub backbone_weights: Option<PathBuf>,
    pub embed_dim: usize,
    pub dropout: f32,
    pub lambda: f64,
    pub lambda_u: Option<f64>,
    pub lambda_m: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub absent_penalty_weight: f64,
    pub dice_denominator: DiceDenominator,
    pub epochs: [usize; 3],
    pub lrs: [f32; 3],
    pub frozen: [GroupMask; 3],
    pub batch_size: usize,
    pub flip: bool,
    pub seed: u64,
    pub map_quantile: f64,
    pub l2_aggregation: L2Aggregation,
    pub agreement: AgreementRule,
    pub contribution_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = StageSchedule::default();
        Self {
            manifest: None,
            preprocess: PreprocessMode::ManualOracle,
            external_mask_dir: None,
            image_size: 224,
            num_classes: 2,
            class_names: vec!["nevus".into(), "melanoma".into()],
            label_map: None,
            concepts: DEFAULT_CONCEPTS
                .iter()
                .map(|(n, p)| (n.to_string(), p.to_string()))
                .collect(),
            phrase_vectors: "random:0".into(),
            phrase_dim: 200,
            backbone: "tiny".into(),
            backbone_weights: None,
            embed_dim: 128,
            dropout: 0.5,
            lambda: 0.4,
            lambda_u: None,
            lambda_m: None,
            gamma: None,
            alpha: 1.0,
            beta: 0.5,
            epsilon: 1e-6,
            absent_penalty_weight: 1.0,
            dice_denominator: DiceDenominator::Sum,
            epochs: schedule.epochs(),
            lrs: schedule.stages.map(|s| s.lr),
            frozen: schedule.stages.map(|s| frozen_of(s.trainable)),
            batch_size: 16,
            flip: true,
            seed: 0,
            map_quantile: 0.7,
            l2_aggregation: L2Aggregation::Sum,
            agreement: AgreementRule::BothCorrect,
            contribution_threshold: DEFAULT_CONTRIBUTION_THRESHOLD,
        }
    }
}

/// The frozen set is the complement of the trainable set.
fn frozen_of(trainable: GroupMask) -> GroupMask {
    GroupMask::only(
        &ParamGroup::ALL
            .into_iter()
            .filter(|g| !trainable.trains(*g))
            .collect::<Vec<_>>(),
    )
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid value {value:?} for {key}"),
    })
}

fn parse_auto(key: &str, value: &str, line: usize) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value, line).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("invalid boolean {value:?} for {key}"),
        }),
    }
}

fn config_err(line: usize, e: Error) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn render_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn render_auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".into(), |v| v.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected key = value, got {trimmed:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it are taken relative to the
    /// file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.external_mask_dir, &mut cfg.backbone_weights] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let stage = |prefix: &str| -> Option<usize> {
            key.strip_prefix("stage")
                .and_then(|rest| rest.strip_suffix(prefix))
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| (1..=3).contains(n))
                .map(|n| n - 1)
        };
        match key {
            "manifest" => self.manifest = parse_path(value),
            "preprocess" => self.preprocess = value.parse().map_err(|e| config_err(line, e))?,
            "external_mask_dir" => self.external_mask_dir = parse_path(value),
            "image_size" => self.image_size = parse_value(key, value, line)?,
            "num_classes" => self.num_classes = parse_value(key, value, line)?,
            "class_names" => self.class_names = value.split(',').map(|s| s.trim().to_string()).collect(),
            "label_map" => {
                self.label_map = match value {
                    "" | "none" => None,
                    v => Some(LabelMap::parse(v).map_err(|e| config_err(line, e))?),
                }
            }
            "concepts" => {
                self.concepts = if value == "default" {
                    Self::default().concepts
                } else {
                    value
                        .split(';')
                        .map(|pair| {
                            pair.split_once(':')
                                .map(|(n, p)| (n.trim().to_string(), p.trim().to_string()))
                                .ok_or_else(|| Error::Parse {
                                    line,
                                    msg: format!("concept entry {pair:?} must be NAME:phrase"),
                                })
                        })
                        .collect::<Result<_>>()?
                }
            }
            "phrase_vectors" => self.phrase_vectors = value.to_string(),
            "phrase_dim" => self.phrase_dim = parse_value(key, value, line)?,
            "backbone" => self.backbone = value.to_string(),
            "backbone_weights" => self.backbone_weights = parse_path(value),
            "embed_dim" => self.embed_dim = parse_value(key, value, line)?,
            "dropout" => self.dropout = parse_value(key, value, line)?,
            "lambda" => self.lambda = parse_value(key, value, line)?,
            "lambda_u" => self.lambda_u = parse_auto(key, value, line)?,
            "lambda_m" => self.lambda_m = parse_auto(key, value, line)?,
            "gamma" => self.gamma = parse_auto(key, value, line)?,
            "alpha" => self.alpha = parse_value(key, value, line)?,
            "beta" => self.beta = parse_value(key, value, line)?,
            "epsilon" => self.epsilon = parse_value(key, value, line)?,
            "absent_penalty_weight" => self.absent_penalty_weight = parse_value(key, value, line)?,
            "dice_denominator" => self.dice_denominator = value.parse().map_err(|e| config_err(line, e))?,
            "batch_size" => self.batch_size = parse_value(key, value, line)?,
            "flip" => self.flip = parse_bool(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "map_quantile" => self.map_quantile = parse_value(key, value, line)?,
            "l2_aggregation" => self.l2_aggregation = value.parse().map_err(|e| config_err(line, e))?,
            "agreement" => self.agreement = value.parse().map_err(|e| config_err(line, e))?,
            "contribution_threshold" => self.contribution_threshold = parse_value(key, value, line)?,
            _ => {
                if let Some(s) = stage("_epochs") {
                    self.epochs[s] = parse_value(key, value, line)?;
                } else if let Some(s) = stage("_lr") {
                    self.lrs[s] = parse_value(key, value, line)?;
                } else if let Some(s) = stage("_frozen") {
                    self.frozen[s] = GroupMask::parse(value).map_err(|e| config_err(line, e))?;
                } else {
                    return Err(Error::Config(format!("unknown configuration key {key:?} at line {line}")));
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("manifest = {}", render_path(&self.manifest)),
            format!("preprocess = {}", self.preprocess),
            format!("external_mask_dir = {}", render_path(&self.external_mask_dir)),
            format!("image_size = {}", self.image_size),
            format!("num_classes = {}", self.num_classes),
            format!("class_names = {}", self.class_names.join(",")),
            format!(
                "label_map = {}",
                self.label_map.as_ref().map_or_else(|| "none".into(), LabelMap::render)
            ),
            format!(
                "concepts = {}",
                self.concepts
                    .iter()
                    .map(|(n, p)| format!("{n}:{p}"))
                    .collect::<Vec<_>>()
                    .join(";")
            ),
            format!("phrase_vectors = {}", self.phrase_vectors),
            format!("phrase_dim = {}", self.phrase_dim),
            format!("backbone = {}", self.backbone),
            format!("backbone_weights = {}", render_path(&self.backbone_weights)),
            format!("embed_dim = {}", self.embed_dim),
            format!("dropout = {}", self.dropout),
            format!("lambda = {}", self.lambda),
            format!("lambda_u = {}", render_auto(self.lambda_u)),
            format!("lambda_m = {}", render_auto(self.lambda_m)),
            format!("gamma = {}", render_auto(self.gamma)),
            format!("alpha = {}", self.alpha),
            format!("beta = {}", self.beta),
            format!("epsilon = {}", self.epsilon),
            format!("absent_penalty_weight = {}", self.absent_penalty_weight),
            format!("dice_denominator = {}", self.dice_denominator),
        ];
        for s in 0..3 {
            lines.push(format!("stage{}_epochs = {}", s + 1, self.epochs[s]));
            lines.push(format!("stage{}_lr = {}", s + 1, self.lrs[s]));
            lines.push(format!("stage{}_frozen = {}", s + 1, self.frozen[s].render()));
        }
        lines.extend([
            format!("batch_size = {}", self.batch_size),
            format!("flip = {}", self.flip),
            format!("seed = {}", self.seed),
            format!("map_quantile = {}", self.map_quantile),
            format!("l2_aggregation = {}", self.l2_aggregation),
            format!("agreement = {}", self.agreement),
            format!("contribution_threshold = {}", self.contribution_threshold),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn vocabulary(&self) -> Result<ConceptVocabulary> {
        let (names, phrases) = self.concepts.iter().cloned().unzip();
        ConceptVocabulary::new(names, phrases)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(self.preprocess))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_u: self.lambda_u.unwrap_or(self.lambda),
            lambda_m: self.lambda_m.unwrap_or(self.lambda),
            gamma: self.gamma(),
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            absent_penalty_weight: self.absent_penalty_weight,
            dice_denominator: self.dice_denominator,
        }
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            stages: [0, 1, 2].map(|s| StageSpec {
                epochs: self.epochs[s],
                lr: self.lrs[s],
                trainable: frozen_of(self.frozen[s]),
            }),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            input_size: (self.image_size, self.image_size),
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            dropout: self.dropout,
        }
    }

    pub fn backbone_options(&self) -> BackboneOptions {
        BackboneOptions {
            seed: self.seed,
            weights: self.backbone_weights.clone(),
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            image_size: (self.image_size, self.image_size),
            num_classes: self.num_classes,
            label_map: self.label_map.clone(),
            require_masks: self.preprocess == PreprocessMode::ManualOracle,
        }
    }

    pub fn segmenter_options(&self) -> SegmenterOptions {
        SegmenterOptions {
            external_mask_dir: self.external_mask_dir.clone(),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            map_quantile: self.map_quantile,
            l2_aggregation: self.l2_aggregation,
            agreement: self.agreement,
            ..EvalOptions::default()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            loss: self.loss_config(),
            schedule: self.schedule(),
            batch_size: self.batch_size,
            flip: self.flip,
            seed: self.seed,
            out_dir: None,
            meta: crate::model::CheckpointMeta {
                preprocess_mode: self.preprocess.to_string(),
                class_names: self.class_names.clone(),
                run_config: self.render(),
                ..Default::default()
            },
        }
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.vocabulary()?;
        self.loss_config().validate()?;
        self.schedule().validate()?;
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(0.0..1.0).contains(&self.map_quantile) {
            return Err(Error::Config("map_quantile must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "# comment\nseed = 7\npreprocess = raw\ngamma = 0.3\nstage2_epochs = 3\nlabel_map = common:0,atypical:0,melanoma:1\nbackbone_weights = w.json\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, [20, 3, 10]);
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("sede = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("stage4_epochs = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match RunConfig::parse("seed = 1\n\nbatch_size = many") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed=1\nseed=2"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn gamma_defaults_follow_mode() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.loss_config().gamma, 0.25);
        cfg.preprocess = PreprocessMode::Raw;
        assert_eq!(cfg.loss_config().gamma, 0.1);
        cfg.gamma = Some(0.0);
        assert_eq!(cfg.loss_config().gamma, 0.0);
    }

    #[test]
    fn stage_masks_are_validated() {
        let cfg = RunConfig::parse("stage1_frozen = none").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }
}
