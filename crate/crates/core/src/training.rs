//! Three-stage optimization: (1) everything but the backbone, (2) the whole
//! network, (3) the classifier alone. Each stage gets a fresh Adam state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::predict;
use crate::losses::{ring_pairs, total_loss, LossBreakdown, LossConfig, LossInputs};
use crate::model::{CheckpointMeta, ConceptModel, GroupMask, ModelGrads, ParamGroup, StepUpstream, TrainInput, TrainStep};
use crate::optim::Adam;
use crate::preprocess::ModelInput;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSpec {
    pub epochs: usize,
    pub lr: f32,
    pub trainable: GroupMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub stages: [StageSpec; 3],
}

impl StageSchedule {
    pub fn new(epochs: [usize; 3], lrs: [f32; 3]) -> Self {
        let masks = [
            GroupMask::except(&[ParamGroup::Backbone]),
            GroupMask::all(),
            GroupMask::only(&[ParamGroup::Classifier]),
        ];
        Self {
            stages: [0, 1, 2].map(|i| StageSpec {
                epochs: epochs[i],
                lr: lrs[i],
                trainable: masks[i],
            }),
        }
    }

    pub fn epochs(&self) -> [usize; 3] {
        self.stages.map(|s| s.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("stage {} learning rate must be positive", i + 1)));
            }
        }
        if self.stages[0].trainable.trains(ParamGroup::Backbone) {
            return Err(Error::Config("stage 1 must freeze the backbone".into()));
        }
        let s3 = self.stages[2].trainable;
        if ParamGroup::ALL
            .iter()
            .any(|&g| g != ParamGroup::Classifier && s3.trains(g))
        {
            return Err(Error::Config("stage 3 may train only the classifier".into()));
        }
        Ok(())
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::new([20, 40, 10], [1e-3, 1e-4, 1e-4])
    }
}

/// Trainable-group mask with the named groups frozen.
pub fn freeze_groups(names: &[&str]) -> Result<GroupMask> {
    let groups = names
        .iter()
        .map(|n| n.trim().parse())
        .collect::<Result<Vec<ParamGroup>>>()?;
    Ok(GroupMask::except(&groups))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub schedule: StageSchedule,
    pub batch_size: usize,
    pub flip: bool,
    pub seed: u64,
    /// Checkpoints and logs are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Template for checkpoint metadata; stage, epoch and accuracy are filled in.
    pub meta: CheckpointMeta,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            schedule: StageSchedule::default(),
            batch_size: 16,
            flip: true,
            seed: 0,
            out_dir: None,
            meta: CheckpointMeta::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Batch-mean loss terms averaged over the epoch.
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    pub val_concept_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConceptModel,
    pub best: ConceptModel,
    pub best_val_accuracy: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

struct Logs {
    dir: PathBuf,
    steps: BufWriter<File>,
    metrics: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: open("steps.jsonl")?,
            metrics: open("metrics.jsonl")?,
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, dir: &Path, value: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n").map_err(|e| Error::io(dir, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

fn flat(image: &Array3<f32>) -> Vec<f32> {
    image.iter().copied().collect()
}

/// Backbone features of every input (and its mirror when flipping).
fn cache_features(model: &ConceptModel, inputs: &[ModelInput], flip: bool) -> Vec<[Option<Vec<f32>>; 2]> {
    inputs
        .par_iter()
        .map(|x| {
            let plain = model.backbone_features(&flat(&x.image));
            let mirrored = flip.then(|| model.backbone_features(&flat(&x.flipped().0)));
            [Some(plain), mirrored]
        })
        .collect()
}

struct Batch<'a> {
    inputs: Vec<&'a ModelInput>,
    flips: Vec<bool>,
    indices: Vec<usize>,
}

fn batch_targets(batch: &Batch<'_>, k: usize, (p, q): (usize, usize)) -> Array4<f64> {
    let mut targets = Array4::<f64>::zeros((batch.inputs.len(), k, p, q));
    for (i, (x, &flip)) in batch.inputs.iter().zip(&batch.flips).enumerate() {
        let region = if flip { x.flipped().1 } else { x.region.clone() };
        if let Some(region) = region {
            for (j, &z) in x.concepts.iter().enumerate() {
                if z != 0 {
                    targets.slice_mut(ndarray::s![i, j, .., ..]).assign(&region);
                }
            }
        }
    }
    targets
}

struct Trainer<'a> {
    opts: &'a TrainOptions,
    train: &'a [ModelInput],
    val: &'a [ModelInput],
    logs: Option<Logs>,
    step: usize,
    records: Vec<EpochRecord>,
    best: ConceptModel,
    best_acc: Option<f64>,
}

impl<'a> Trainer<'a> {
    fn checkpoint(&self, model: &ConceptModel, name: &str, stage: u8, epoch: usize, acc: Option<f64>) -> Result<()> {
        if let Some(logs) = &self.logs {
            let meta = CheckpointMeta {
                stage,
                epoch,
                val_accuracy: acc,
                ..self.opts.meta.clone()
            };
            model.save(&logs.dir.join(name), meta)?;
        }
        Ok(())
    }

    fn run_batch(
        &mut self,
        model: &mut ConceptModel,
        optimizer: &mut Adam,
        mask: &GroupMask,
        batch: &Batch<'_>,
        features: Option<&[[Option<Vec<f32>>; 2]]>,
        rng: &mut ChaCha8Rng,
        tag: &str,
    ) -> Result<LossBreakdown> {
        let keep_backbone = mask.trains(ParamGroup::Backbone);
        let dropout_seeds: Vec<u64> = batch.inputs.iter().map(|_| rng.gen()).collect();
        let pairs = ring_pairs(batch.inputs.len(), rng);

        let steps: Vec<TrainStep> = (0..batch.inputs.len())
            .into_par_iter()
            .map(|i| {
                let flip = batch.flips[i];
                match features {
                    Some(cache) => {
                        let f = cache[batch.indices[i]][usize::from(flip)]
                            .as_deref()
                            .expect("mirrored features cached when flipping");
                        model.train_forward(TrainInput::Features(f), dropout_seeds[i], false)
                    }
                    None => {
                        let image = if flip {
                            batch.inputs[i].flipped().0
                        } else {
                            batch.inputs[i].image.clone()
                        };
                        model.train_forward(TrainInput::Image(&flat(&image)), dropout_seeds[i], keep_backbone)
                    }
                }
            })
            .collect();

        let b = steps.len();
        let k = model.num_concepts();
        let c = model.num_classes();
        let de = model.config().embed_dim;
        let (p, q) = model.map_dims();
        let gather = |f: &dyn Fn(&TrainStep) -> &[f32]| -> Vec<f64> {
            steps.iter().flat_map(|s| f(s).iter().map(|&v| f64::from(v))).collect()
        };
        let scores = Array2::from_shape_vec((b, c), gather(&|s| &s.class_scores)).expect("scores");
        let logits = Array2::from_shape_vec((b, k), gather(&|s| &s.logits)).expect("logits");
        let visual = Array3::from_shape_vec((b, k, de), gather(&|s| &s.visual)).expect("visual");
        let maps = Array4::from_shape_vec((b, k, p, q), gather(&|s| &s.maps)).expect("maps");
        let concepts = Array2::from_shape_fn((b, k), |(i, j)| f64::from(batch.inputs[i].concepts[j]));
        let labels: Vec<usize> = batch.inputs.iter().map(|x| x.label).collect();
        let phrase = model.embed_phrases().mapv(f64::from);
        let targets = batch_targets(batch, k, (p, q));

        let out = total_loss(
            &LossInputs {
                class_scores: scores.view(),
                labels: &labels,
                logits: logits.view(),
                concepts: concepts.view(),
                visual: visual.view(),
                phrase: phrase.view(),
                maps: maps.view(),
                targets: targets.view(),
                pairs: &pairs,
            },
            &self.opts.loss,
        );
        if !out.breakdown.is_finite() {
            let ids: Vec<&str> = batch.inputs.iter().map(|x| x.id.as_str()).collect();
            return Err(Error::Diverged(format!(
                "{tag} step {}: samples {ids:?}, breakdown {}",
                self.step,
                serde_json::to_string(&out.breakdown)?
            )));
        }

        let to_f32 = |v: ndarray::ArrayView<f64, _>| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
        let g = &out.grads;
        let per_sample: Vec<ModelGrads> = (0..b)
            .into_par_iter()
            .map(|i| {
                let ds = to_f32(g.class_scores.index_axis(Axis(0), i).into_dyn());
                let dl = to_f32(g.logits.index_axis(Axis(0), i).into_dyn());
                let dv = to_f32(g.visual.index_axis(Axis(0), i).into_dyn());
                let dm = to_f32(g.maps.index_axis(Axis(0), i).into_dyn());
                let mut grads = model.zero_grads();
                let up = StepUpstream {
                    class_scores: &ds,
                    logits: &dl,
                    visual: &dv,
                    maps: &dm,
                };
                model.train_backward(&steps[i], &up, mask, &mut grads);
                grads
            })
            .collect();
        let mut grads = model.zero_grads();
        for sample in &per_sample {
            grads.add(sample);
        }
        if mask.trains(ParamGroup::PhraseEmbedding) {
            model.phrase_embedding_backward(&to_f32(g.phrase.view().into_dyn()), &mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::Diverged(format!("{tag} step {}: non-finite gradient", self.step)));
        }
        optimizer.step(model, &grads, mask);

        if let Some(logs) = &mut self.logs {
            let record = StepRecord {
                step: self.step,
                loss: out.breakdown.clone(),
            };
            Logs::line(&mut logs.steps, &logs.dir, &record)?;
        }
        self.step += 1;
        Ok(out.breakdown)
    }

    fn run_stage(&mut self, model: &mut ConceptModel, stage_index: usize) -> Result<()> {
        let spec = self.opts.schedule.stages[stage_index];
        let stage = stage_index as u8 + 1;
        if spec.epochs == 0 {
            return Ok(());
        }
        let mut optimizer = Adam::new(model, spec.lr);
        let features = (!spec.trainable.trains(ParamGroup::Backbone))
            .then(|| cache_features(model, self.train, self.opts.flip));

        for epoch in 0..spec.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
            rng.set_stream(((stage as u64) << 32) | (epoch as u64 + 1));
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut rng);

            let mut epoch_loss = LossBreakdown::default();
            let mut seen = 0usize;
            for (bi, chunk) in order.chunks(self.opts.batch_size).enumerate() {
                let batch = Batch {
                    inputs: chunk.iter().map(|&i| &self.train[i]).collect(),
                    flips: chunk.iter().map(|_| self.opts.flip && rng.gen_bool(0.5)).collect(),
                    indices: chunk.to_vec(),
                };
                let tag = format!("stage {stage} epoch {epoch} batch {bi}");
                let loss = self.run_batch(
                    model,
                    &mut optimizer,
                    &spec.trainable,
                    &batch,
                    features.as_deref(),
                    &mut rng,
                    &tag,
                )?;
                epoch_loss.accumulate(&loss, chunk.len() as f64);
                seen += chunk.len();
            }
            let mut mean = LossBreakdown::default();
            mean.accumulate(&epoch_loss, 1.0 / seen as f64);

            let preds = predict(model, self.val)?;
            let record = EpochRecord {
                stage,
                epoch,
                loss: mean,
                val_accuracy: preds.accuracy(),
                val_concept_f1: preds.concept_f1().micro,
            };
            info!(
                "stage {stage} epoch {epoch}: loss {:.4} val acc {:.4} concept F1 {:.4}",
                record.loss.total, record.val_accuracy, record.val_concept_f1
            );
            if let Some(logs) = &mut self.logs {
                Logs::line(&mut logs.metrics, &logs.dir, &record)?;
                logs.flush()?;
            }
            if self.best_acc.map_or(true, |b| record.val_accuracy > b) {
                self.best_acc = Some(record.val_accuracy);
                self.best = model.clone();
                self.checkpoint(model, "best.json", stage, epoch, self.best_acc)?;
            }
            self.records.push(record);
        }
        Ok(())
    }
}

/// Runs the staged schedule on `model`. Sample order, flips, dropout masks
/// and counter-image pairs are all derived from `opts.seed`.
pub fn train(mut model: ConceptModel, train: &[ModelInput], val: &[ModelInput], opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.loss.validate()?;
    opts.schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("train and validation splits must be non-empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if opts.loss.gamma > 0.0 {
        if let Some(x) = train.iter().find(|x| x.region.is_none()) {
            return Err(Error::Config(format!(
                "coherence weight gamma > 0 needs a lesion mask for every training sample; {:?} has none",
                x.id
            )));
        }
    }
    let logs = opts.out_dir.as_deref().map(Logs::open).transpose()?;
    let mut trainer = Trainer {
        opts,
        train,
        val,
        logs,
        step: 0,
        records: Vec::new(),
        best: model.clone(),
        best_acc: None,
    };
    if opts.schedule.epochs().iter().all(|&e| e == 0) {
        trainer.checkpoint(&model, "best.json", 0, 0, None)?;
    }
    for stage in 0..3 {
        trainer.run_stage(&mut model, stage)?;
    }
    let last = trainer.records.last().map(|r| (r.stage, r.epoch, Some(r.val_accuracy)));
    let (stage, epoch, acc) = last.unwrap_or((0, 0, None));
    trainer.checkpoint(&model, "final.json", stage, epoch, acc)?;
    if let Some(logs) = &mut trainer.logs {
        logs.flush()?;
    }
    Ok(TrainOutcome {
        model,
        best: trainer.best,
        best_val_accuracy: trainer.best_acc,
        epochs: trainer.records,
        steps: trainer.step,
    })
}
