//! End-to-end wiring from a [`RunConfig`] and a manifest to trained models
//! and evaluation reports.

use std::path::Path;

use log::warn;

use crate::config::RunConfig;
use crate::dataset::{load_manifest, select, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::LossConfig;
use crate::model::{load_phrase_embeddings, BackboneRegistry, CheckpointMeta, ConceptModel};
use crate::preprocess::{prepare_inputs, ModelInput, PreprocessMode, Preprocessor};
use crate::training::{train, TrainOptions, TrainOutcome};

/// Preprocessed inputs of the three splits.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub mode: PreprocessMode,
    pub train: Vec<ModelInput>,
    pub val: Vec<ModelInput>,
    pub test: Vec<ModelInput>,
}

impl PreparedSplits {
    pub fn get(&self, split: Split) -> &[ModelInput] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A freshly initialized model as described by `cfg`.
pub fn build_model(cfg: &RunConfig, registry: &BackboneRegistry) -> Result<ConceptModel> {
    let vocab = cfg.vocabulary()?;
    let phrases = load_phrase_embeddings(&cfg.phrase_vectors, &vocab, cfg.phrase_dim)?;
    ConceptModel::build(
        cfg.model_config(),
        vocab,
        phrases,
        registry,
        &cfg.backbone_options(),
        cfg.seed,
    )
}

/// Loads the manifest and preprocesses every split for a model with
/// concept maps of size `map_dims`.
pub fn prepare_splits(cfg: &RunConfig, manifest: &Path, map_dims: (usize, usize)) -> Result<PreparedSplits> {
    let vocab = cfg.vocabulary()?;
    let samples = load_manifest(manifest, &vocab, &cfg.load_options())?;
    let pre = Preprocessor::new(cfg.preprocess, &cfg.segmenter_options())?;
    let prep = |split| prepare_inputs(&select(&samples, split), &pre, map_dims);
    Ok(PreparedSplits {
        mode: cfg.preprocess,
        train: prep(Split::Train)?,
        val: prep(Split::Val)?,
        test: prep(Split::Test)?,
    })
}

/// Resolved loss weights for a run on `splits`. Raw mode without lesion
/// masks has no coherence region, so the coherence term is switched off.
pub fn effective_loss(cfg: &RunConfig, splits: &PreparedSplits) -> LossConfig {
    let mut loss = cfg.loss_config();
    if splits.mode == PreprocessMode::Raw && loss.gamma > 0.0 && splits.train.iter().any(|x| x.region.is_none()) {
        warn!("raw mode without lesion masks: coherence loss disabled");
        loss.gamma = 0.0;
    }
    loss
}

pub fn train_options(cfg: &RunConfig, splits: &PreparedSplits, out_dir: Option<&Path>) -> TrainOptions {
    TrainOptions {
        loss: effective_loss(cfg, splits),
        out_dir: out_dir.map(Path::to_path_buf),
        ..cfg.train_options()
    }
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub splits: PreparedSplits,
}

/// Validates `cfg`, loads `manifest`, trains, and (with `out_dir`) writes the
/// config echo, logs and checkpoints.
pub fn run_training(cfg: &RunConfig, manifest: &Path, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let registry = BackboneRegistry::with_defaults();
    let model = build_model(cfg, &registry)?;
    let splits = prepare_splits(cfg, manifest, model.map_dims())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = RunConfig {
            manifest: Some(manifest.to_path_buf()),
            ..cfg.clone()
        };
        let path = dir.join("config.txt");
        std::fs::write(&path, echo.render()).map_err(|e| Error::io(path, e))?;
    }
    let opts = train_options(cfg, &splits, out_dir);
    let outcome = train(model, &splits.train, &splits.val, &opts)?;
    Ok(TrainRun { outcome, splits })
}

/// Loads checkpoints and evaluates them on `split` of the manifest. All
/// checkpoints must share an input size and concept-map size.
pub fn run_evaluation(cfg: &RunConfig, manifest: &Path, checkpoints: &[&Path], split: Split) -> Result<EvalReport> {
    let registry = BackboneRegistry::with_defaults();
    let mut models = Vec::new();
    for path in checkpoints {
        let (model, _) = ConceptModel::load(path, &registry)?;
        models.push((path.display().to_string(), model));
    }
    let first = &models
        .first()
        .ok_or_else(|| Error::Argument("no checkpoint given".into()))?
        .1;
    let mut data_cfg = cfg.clone();
    data_cfg.image_size = first.config().input_size.0;
    for (name, m) in &models {
        if m.map_dims() != first.map_dims() || m.config().input_size != first.config().input_size {
            return Err(Error::Argument(format!("checkpoint {name} has a different input or map size")));
        }
    }
    let splits = prepare_splits(&data_cfg, manifest, first.map_dims())?;
    let named: Vec<(String, &ConceptModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    evaluate(&named, &splits.train, splits.get(split), split.as_str(), &cfg.eval_options())
}

/// Checkpoint metadata for a run described by `cfg`.
pub fn checkpoint_meta(cfg: &RunConfig) -> CheckpointMeta {
    cfg.train_options().meta
}
