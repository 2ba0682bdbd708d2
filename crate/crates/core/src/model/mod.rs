//! Concept-bottleneck network: backbone -> 1x1 concept encoder + ReLU ->
//! GAP -> linear classifier, plus the joint visual/phrase embedding heads
//! used by the mapping-consistency loss.

mod backbone;
mod checkpoint;
mod conv;
mod linalg;
mod phrases;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use backbone::{
    Backbone, BackboneFactory, BackboneOptions, BackboneRegistry, BackboneState, ImportedBackbone, TinyConvNet,
};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use conv::{ConvSpec, ConvStack, StackCache};
pub use phrases::{load_phrase_embeddings, read_word_vectors, tokenize, ConceptPhraseEmbedding, CACHE_ENV};

use crate::error::{Error, Result};
use crate::vocab::ConceptVocabulary;
use linalg::gemm;

/// Independently freezable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Encoder,
    VisualEmbedding,
    PhraseEmbedding,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        Self::Backbone,
        Self::Encoder,
        Self::VisualEmbedding,
        Self::PhraseEmbedding,
        Self::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Encoder => "encoder",
            Self::VisualEmbedding => "visual_embedding",
            Self::PhraseEmbedding => "phrase_embedding",
            Self::Classifier => "classifier",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupMask([bool; 5]);

impl GroupMask {
    pub fn all() -> Self {
        Self([true; 5])
    }

    pub fn none() -> Self {
        Self([false; 5])
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        let mut m = Self::none();
        for &g in groups {
            m.0[g.index()] = true;
        }
        m
    }

    pub fn except(groups: &[ParamGroup]) -> Self {
        let mut m = Self::all();
        for &g in groups {
            m.0[g.index()] = false;
        }
        m
    }

    pub fn trains(&self, g: ParamGroup) -> bool {
        self.0[g.index()]
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&t| t)
    }

    /// Comma-separated trainable group names; `all` and `none` are accepted.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "all" => Ok(Self::all()),
            "none" | "" => Ok(Self::none()),
            list => {
                let groups = list
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<ParamGroup>>>()?;
                Ok(Self::only(&groups))
            }
        }
    }

    pub fn render(&self) -> String {
        if *self == Self::all() {
            return "all".into();
        }
        if !self.any() {
            return "none".into();
        }
        ParamGroup::ALL
            .iter()
            .filter(|g| self.trains(**g))
            .map(|g| g.name())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: String,
    /// (H, W) of the network input.
    pub input_size: (usize, usize),
    pub num_classes: usize,
    /// Joint embedding width d_e.
    pub embed_dim: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: TinyConvNet::KIND.into(),
            input_size: (128, 128),
            num_classes: 2,
            embed_dim: 128,
            dropout: 0.5,
        }
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMaps {
    /// k x p x q, non-negative.
    pub maps: Array3<f32>,
    /// GAP of each map.
    pub logits: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_scores: Array1<f32>,
    pub concepts: ConceptMaps,
    /// k x d_e
    pub visual_embedding: Array2<f32>,
}

/// Input of a training forward pass: raw image, or backbone features cached
/// while the backbone is frozen.
#[derive(Debug, Clone, Copy)]
pub enum TrainInput<'a> {
    Image(&'a [f32]),
    Features(&'a [f32]),
}

/// Outputs and saved activations of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub class_scores: Vec<f32>,
    pub logits: Vec<f32>,
    /// k x d_e
    pub visual: Vec<f32>,
    /// k x p x q, after dropout.
    pub maps: Vec<f32>,
    features: Vec<f32>,
    backbone: Option<StackCache>,
    pre: Vec<f32>,
    drop: Option<Vec<f32>>,
}

/// Loss gradients flowing into one sample's outputs.
#[derive(Debug, Clone, Copy)]
pub struct StepUpstream<'a> {
    pub class_scores: &'a [f32],
    pub logits: &'a [f32],
    pub visual: &'a [f32],
    pub maps: &'a [f32],
}

/// Gradient buffers, one per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    groups: [Vec<f32>; 5],
}

impl ModelGrads {
    pub fn group(&self, g: ParamGroup) -> &[f32] {
        &self.groups[g.index()]
    }

    fn group_mut(&mut self, g: ParamGroup) -> &mut [f32] {
        &mut self.groups[g.index()]
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ConceptModel {
    config: ModelConfig,
    vocab: ConceptVocabulary,
    phrases: ConceptPhraseEmbedding,
    backbone: Box<dyn Backbone>,
    /// (n_f, p, q)
    feature_dims: (usize, usize, usize),
    /// k x n_f weights followed by k biases.
    encoder: Vec<f32>,
    /// d_e x (p q)
    visual_embedding: Vec<f32>,
    /// d_e x d
    phrase_embedding: Vec<f32>,
    /// |C| x k weights followed by |C| biases.
    classifier: Vec<f32>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ConceptModel {
    /// Builds a freshly initialized model around `backbone`.
    pub fn new(
        config: ModelConfig,
        vocab: ConceptVocabulary,
        phrases: ConceptPhraseEmbedding,
        backbone: Box<dyn Backbone>,
        seed: u64,
    ) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if config.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", config.dropout)));
        }
        if phrases.vectors.nrows() != vocab.len() {
            return Err(Error::Config(format!(
                "{} phrase vectors for {} concepts",
                phrases.vectors.nrows(),
                vocab.len()
            )));
        }
        if backbone.kind() != config.backbone {
            return Err(Error::Config(format!(
                "backbone kind {:?} does not match configured {:?}",
                backbone.kind(),
                config.backbone
            )));
        }
        let feature_dims = backbone.feature_dims(config.input_size)?;
        let (nf, p, q) = feature_dims;
        let cells = p * q;
        let k = vocab.len();
        let c = config.num_classes;
        let de = config.embed_dim;
        let d = phrases.dim();

        let stream = |i: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i + 100);
            rng
        };
        let mut encoder = normal_vec(&mut stream(1), k * nf, (2.0 / nf as f32).sqrt());
        encoder.extend(std::iter::repeat(0.0).take(k));
        let visual_embedding = normal_vec(&mut stream(2), de * cells, (1.0 / cells as f32).sqrt());
        let phrase_embedding = normal_vec(&mut stream(3), de * d, (1.0 / d as f32).sqrt());
        let mut classifier = normal_vec(&mut stream(4), c * k, (1.0 / k as f32).sqrt());
        classifier.extend(std::iter::repeat(0.0).take(c));

        Ok(Self {
            config,
            vocab,
            phrases,
            backbone,
            feature_dims,
            encoder,
            visual_embedding,
            phrase_embedding,
            classifier,
        })
    }

    /// Builds the backbone from `registry` and initializes the model.
    pub fn build(
        config: ModelConfig,
        vocab: ConceptVocabulary,
        phrases: ConceptPhraseEmbedding,
        registry: &BackboneRegistry,
        backbone_opts: &BackboneOptions,
        seed: u64,
    ) -> Result<Self> {
        let backbone = registry.build(&config.backbone, backbone_opts)?;
        Self::new(config, vocab, phrases, backbone, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    pub fn phrases(&self) -> &ConceptPhraseEmbedding {
        &self.phrases
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn num_concepts(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// (n_f, p, q)
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        self.feature_dims
    }

    pub fn map_dims(&self) -> (usize, usize) {
        (self.feature_dims.1, self.feature_dims.2)
    }

    pub fn group(&self, g: ParamGroup) -> &[f32] {
        match g {
            ParamGroup::Backbone => self.backbone.params(),
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::VisualEmbedding => &self.visual_embedding,
            ParamGroup::PhraseEmbedding => &self.phrase_embedding,
            ParamGroup::Classifier => &self.classifier,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f32] {
        match g {
            ParamGroup::Backbone => self.backbone.params_mut(),
            ParamGroup::Encoder => &mut self.encoder,
            ParamGroup::VisualEmbedding => &mut self.visual_embedding,
            ParamGroup::PhraseEmbedding => &mut self.phrase_embedding,
            ParamGroup::Classifier => &mut self.classifier,
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            groups: ParamGroup::ALL.map(|g| vec![0.0; self.group(g).len()]),
        }
    }

    fn split_encoder(&self) -> (&[f32], &[f32]) {
        self.encoder.split_at(self.num_concepts() * self.feature_dims.0)
    }

    fn split_classifier(&self) -> (&[f32], &[f32]) {
        self.classifier.split_at(self.num_classes() * self.num_concepts())
    }

    /// |C| x k classifier weights.
    pub fn classifier_weights(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.num_classes(), self.num_concepts()), self.split_classifier().0)
            .expect("classifier layout")
    }

    pub fn classifier_bias(&self) -> ArrayView1<'_, f32> {
        ArrayView1::from(self.split_classifier().1)
    }

    /// k x n_f encoder weights.
    pub fn encoder_weights(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.num_concepts(), self.feature_dims.0), self.split_encoder().0)
            .expect("encoder layout")
    }

    fn check_image(&self, image: &ArrayView3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        let (eh, ew) = self.config.input_size;
        if (h, w) != (eh, ew) {
            return Err(Error::Argument(format!(
                "image is {h}x{w}, model expects {eh}x{ew}"
            )));
        }
        if c != 3 {
            return Err(Error::Argument(format!("expected 3 channels, got {c}")));
        }
        Ok(())
    }

    fn flat(image: &ArrayView3<f32>) -> Vec<f32> {
        image.iter().copied().collect()
    }

    /// Backbone features, n_f x p x q.
    pub fn extract_features(&self, image: ArrayView3<f32>) -> Result<Array3<f32>> {
        self.check_image(&image)?;
        let f = self.backbone.forward(&Self::flat(&image), self.config.input_size);
        let (nf, p, q) = self.feature_dims;
        Ok(Array3::from_shape_vec((nf, p, q), f).expect("backbone output layout"))
    }

    /// Raw (unchecked) backbone features for a flat CHW image.
    pub fn backbone_features(&self, image: &[f32]) -> Vec<f32> {
        self.backbone.forward(image, self.config.input_size)
    }

    /// Encoder pre-activation (k x P) from features (n_f x P).
    fn encode(&self, features: &[f32]) -> Vec<f32> {
        let (nf, p, q) = self.feature_dims;
        let cells = p * q;
        let k = self.num_concepts();
        let (w, b) = self.split_encoder();
        let mut pre = vec![0.0f32; k * cells];
        for (row, &bias) in pre.chunks_mut(cells).zip(b) {
            row.fill(bias);
        }
        gemm(k, nf, cells, w, false, features, false, &mut pre, 1.0);
        pre
    }

    fn gap(&self, maps: &[f32]) -> Vec<f32> {
        let (_, p, q) = self.feature_dims;
        maps.chunks(p * q)
            .map(|m| m.iter().sum::<f32>() / (p * q) as f32)
            .collect()
    }

    fn visual_from_maps(&self, maps: &[f32]) -> Vec<f32> {
        let (_, p, q) = self.feature_dims;
        let k = self.num_concepts();
        let de = self.config.embed_dim;
        let mut out = vec![0.0f32; k * de];
        gemm(k, p * q, de, maps, false, &self.visual_embedding, true, &mut out, 0.0);
        out
    }

    fn scores_from_logits(&self, logits: &[f32]) -> Vec<f32> {
        let (w, b) = self.split_classifier();
        let k = self.num_concepts();
        b.iter()
            .enumerate()
            .map(|(c, &bias)| bias + w[c * k..(c + 1) * k].iter().zip(logits).map(|(a, v)| a * v).sum::<f32>())
            .collect()
    }

    /// `W v + b`.
    pub fn classify_logits(&self, logits: ArrayView1<f32>) -> Array1<f32> {
        Array1::from(self.scores_from_logits(&logits.to_vec()))
    }

    fn maps_array(&self, maps: Vec<f32>) -> Array3<f32> {
        let (_, p, q) = self.feature_dims;
        Array3::from_shape_vec((self.num_concepts(), p, q), maps).expect("map layout")
    }

    /// Evaluation-mode forward pass: `(class_scores, concept maps)`.
    pub fn forward(&self, image: ArrayView3<f32>) -> Result<(Array1<f32>, ConceptMaps)> {
        let out = self.forward_full(image)?;
        Ok((out.class_scores, out.concepts))
    }

    pub fn forward_full(&self, image: ArrayView3<f32>) -> Result<ForwardOutput> {
        self.check_image(&image)?;
        let features = self.backbone.forward(&Self::flat(&image), self.config.input_size);
        Ok(self.forward_from_features(&features))
    }

    /// Evaluation-mode heads over precomputed backbone features.
    pub fn forward_from_features(&self, features: &[f32]) -> ForwardOutput {
        let mut maps = self.encode(features);
        maps.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.gap(&maps);
        let visual = self.visual_from_maps(&maps);
        let scores = self.scores_from_logits(&logits);
        ForwardOutput {
            class_scores: Array1::from(scores),
            visual_embedding: Array2::from_shape_vec((self.num_concepts(), self.config.embed_dim), visual)
                .expect("embedding layout"),
            concepts: ConceptMaps {
                maps: self.maps_array(maps),
                logits: Array1::from(logits),
            },
        }
    }

    /// `E_v` applied to each flattened concept map: k x d_e.
    pub fn embed_visual(&self, maps: &ConceptMaps) -> Result<Array2<f32>> {
        let (k, p, q) = maps.maps.dim();
        if (k, p, q) != (self.num_concepts(), self.feature_dims.1, self.feature_dims.2) {
            return Err(Error::Argument(format!("concept maps have shape {:?}", (k, p, q))));
        }
        let flat: Vec<f32> = maps.maps.iter().copied().collect();
        Ok(Array2::from_shape_vec((k, self.config.embed_dim), self.visual_from_maps(&flat))
            .expect("embedding layout"))
    }

    /// `E_s` applied to each phrase vector: k x d_e.
    pub fn embed_phrases(&self) -> Array2<f32> {
        let k = self.num_concepts();
        let d = self.phrases.dim();
        let de = self.config.embed_dim;
        let s: Vec<f32> = self.phrases.vectors.iter().copied().collect();
        let mut out = vec![0.0f32; k * de];
        gemm(k, d, de, &s, false, &self.phrase_embedding, true, &mut out, 0.0);
        Array2::from_shape_vec((k, de), out).expect("embedding layout")
    }

    /// Training-mode forward pass for one sample. Dropout masks are drawn
    /// from `dropout_seed`; backbone activations are kept only when
    /// `keep_backbone` is set.
    pub fn train_forward(&self, input: TrainInput<'_>, dropout_seed: u64, keep_backbone: bool) -> TrainStep {
        let (features, backbone) = match input {
            TrainInput::Features(f) => (f.to_vec(), None),
            TrainInput::Image(img) if keep_backbone => {
                let (f, cache) = self.backbone.forward_train(img, self.config.input_size);
                (f, Some(cache))
            }
            TrainInput::Image(img) => (self.backbone.forward(img, self.config.input_size), None),
        };
        let pre = self.encode(&features);
        let mut maps: Vec<f32> = pre.iter().map(|v| v.max(0.0)).collect();
        let rate = self.config.dropout;
        let drop = (rate > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let keep = 1.0 / (1.0 - rate);
            (0..maps.len())
                .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
                .collect::<Vec<f32>>()
        });
        if let Some(d) = &drop {
            maps.iter_mut().zip(d).for_each(|(m, s)| *m *= s);
        }
        let logits = self.gap(&maps);
        let visual = self.visual_from_maps(&maps);
        let class_scores = self.scores_from_logits(&logits);
        TrainStep {
            class_scores,
            logits,
            visual,
            maps,
            features,
            backbone,
            pre,
            drop,
        }
    }

    /// Backpropagates one sample's upstream gradients into `grads`, touching
    /// only the groups `mask` trains. The phrase-embedding group is handled
    /// per batch by [`Self::phrase_embedding_backward`].
    pub fn train_backward(&self, step: &TrainStep, up: &StepUpstream<'_>, mask: &GroupMask, grads: &mut ModelGrads) {
        let (nf, p, q) = self.feature_dims;
        let cells = p * q;
        let k = self.num_concepts();
        let c = self.num_classes();
        let de = self.config.embed_dim;
        let (cls_w, _) = self.split_classifier();

        if mask.trains(ParamGroup::Classifier) {
            let g = grads.group_mut(ParamGroup::Classifier);
            for ci in 0..c {
                for j in 0..k {
                    g[ci * k + j] += up.class_scores[ci] * step.logits[j];
                }
                g[c * k + ci] += up.class_scores[ci];
            }
        }
        if mask.trains(ParamGroup::VisualEmbedding) {
            let g = grads.group_mut(ParamGroup::VisualEmbedding);
            gemm(de, k, cells, up.visual, true, &step.maps, false, g, 1.0);
        }
        let needs_maps = mask.trains(ParamGroup::Encoder) || mask.trains(ParamGroup::Backbone);
        if !needs_maps {
            return;
        }
        let mut d_maps = up.maps.to_vec();
        for j in 0..k {
            let dv = up.logits[j] + (0..c).map(|ci| cls_w[ci * k + j] * up.class_scores[ci]).sum::<f32>();
            d_maps[j * cells..(j + 1) * cells]
                .iter_mut()
                .for_each(|g| *g += dv / cells as f32);
        }
        gemm(k, de, cells, up.visual, false, &self.visual_embedding, false, &mut d_maps, 1.0);
        if let Some(drop) = &step.drop {
            d_maps.iter_mut().zip(drop).for_each(|(g, s)| *g *= s);
        }
        d_maps.iter_mut().zip(&step.pre).for_each(|(g, &pre)| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        if mask.trains(ParamGroup::Encoder) {
            let g = grads.group_mut(ParamGroup::Encoder);
            let (gw, gb) = g.split_at_mut(k * nf);
            gemm(k, cells, nf, &d_maps, false, &step.features, true, gw, 1.0);
            for (b, row) in gb.iter_mut().zip(d_maps.chunks(cells)) {
                *b += row.iter().sum::<f32>();
            }
        }
        if mask.trains(ParamGroup::Backbone) {
            let cache = step
                .backbone
                .as_ref()
                .expect("backbone activations kept when the backbone trains");
            let (enc_w, _) = self.split_encoder();
            let mut d_features = vec![0.0f32; nf * cells];
            gemm(nf, k, cells, enc_w, true, &d_maps, false, &mut d_features, 0.0);
            self.backbone
                .backward(cache, d_features, grads.group_mut(ParamGroup::Backbone));
        }
    }

    /// Accumulates `dL/dE_s` given `dL/d(embedded phrases)` (k x d_e).
    pub fn phrase_embedding_backward(&self, grad_phrase: &[f32], grads: &mut ModelGrads) {
        let k = self.num_concepts();
        let d = self.phrases.dim();
        let de = self.config.embed_dim;
        let s: Vec<f32> = self.phrases.vectors.iter().copied().collect();
        gemm(de, k, d, grad_phrase, true, &s, false, grads.group_mut(ParamGroup::PhraseEmbedding), 1.0);
    }
}
