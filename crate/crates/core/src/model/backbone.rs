//! Feature extractors, selected by name through [`BackboneRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::conv::{ConvSpec, ConvStack, StackCache};
use crate::error::{Error, Result};

/// Serialized backbone: kind tag plus the conv-stack layout and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneState {
    pub kind: String,
    pub layers: Vec<ConvSpec>,
    pub params: Vec<f32>,
}

impl BackboneState {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub trait Backbone: Send + Sync + fmt::Debug {
    fn kind(&self) -> &str;
    /// `(n_f, p, q)` for an `H x W` input.
    fn feature_dims(&self, input: (usize, usize)) -> Result<(usize, usize, usize)>;
    fn forward(&self, image: &[f32], dims: (usize, usize)) -> Vec<f32>;
    fn forward_train(&self, image: &[f32], dims: (usize, usize)) -> (Vec<f32>, StackCache);
    fn backward(&self, cache: &StackCache, grad_features: Vec<f32>, grad_params: &mut [f32]);
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];
    fn state(&self) -> BackboneState;
    fn clone_box(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

macro_rules! delegate_stack {
    () => {
        fn feature_dims(&self, input: (usize, usize)) -> Result<(usize, usize, usize)> {
            self.stack.output_dims(input)
        }
        fn forward(&self, image: &[f32], dims: (usize, usize)) -> Vec<f32> {
            self.stack.forward(image, dims)
        }
        fn forward_train(&self, image: &[f32], dims: (usize, usize)) -> (Vec<f32>, StackCache) {
            self.stack.forward_train(image, dims)
        }
        fn backward(&self, cache: &StackCache, grad_features: Vec<f32>, grad_params: &mut [f32]) {
            self.stack.backward(cache, grad_features, grad_params)
        }
        fn params(&self) -> &[f32] {
            self.stack.params()
        }
        fn params_mut(&mut self) -> &mut [f32] {
            self.stack.params_mut()
        }
        fn state(&self) -> BackboneState {
            BackboneState {
                kind: self.kind().to_string(),
                layers: self.stack.specs().to_vec(),
                params: self.stack.params().to_vec(),
            }
        }
        fn clone_box(&self) -> Box<dyn Backbone> {
            Box::new(self.clone())
        }
    };
}

/// Four stride-2 3x3 conv + ReLU blocks (3 -> 16 -> 32 -> 64 -> 128)
/// followed by two stride-1 blocks dilated by 2 and 4, trained from scratch
/// on standardized pixels. A 128 x 128 input yields 128 x 8 x 8 features,
/// each seeing a 223-pixel window.
#[derive(Debug, Clone)]
pub struct TinyConvNet {
    stack: ConvStack,
}

impl TinyConvNet {
    pub const KIND: &'static str = "tiny";
    pub const CHANNELS: [usize; 5] = [3, 16, 32, 64, 128];
    pub const DILATIONS: [usize; 2] = [2, 4];

    pub fn layout() -> Vec<ConvSpec> {
        let width = Self::CHANNELS[Self::CHANNELS.len() - 1];
        let down = Self::CHANNELS.windows(2).map(|c| ConvSpec {
            in_channels: c[0],
            out_channels: c[1],
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
        });
        let context = Self::DILATIONS.iter().map(|&d| ConvSpec {
            in_channels: width,
            out_channels: width,
            kernel: 3,
            stride: 1,
            padding: d,
            dilation: d,
        });
        down.chain(context).collect()
    }

    pub fn new(seed: u64) -> Self {
        Self {
            stack: ConvStack::initialized(Self::layout(), seed).expect("static layout is valid"),
        }
    }

    /// Maps `[0, 1]` pixels to roughly zero mean and unit spread.
    fn standardize(image: &[f32]) -> Vec<f32> {
        image.iter().map(|&x| (x - 0.5) * 4.0).collect()
    }

    fn from_state(state: BackboneState) -> Result<Self> {
        if state.layers != Self::layout() {
            return Err(Error::Checkpoint("tiny backbone state has a foreign layout".into()));
        }
        Ok(Self {
            stack: ConvStack::new(state.layers, state.params)?,
        })
    }
}

impl Backbone for TinyConvNet {
    fn kind(&self) -> &str {
        Self::KIND
    }
    fn feature_dims(&self, input: (usize, usize)) -> Result<(usize, usize, usize)> {
        self.stack.output_dims(input)
    }
    fn forward(&self, image: &[f32], dims: (usize, usize)) -> Vec<f32> {
        self.stack.forward(&Self::standardize(image), dims)
    }
    fn forward_train(&self, image: &[f32], dims: (usize, usize)) -> (Vec<f32>, StackCache) {
        self.stack.forward_train(&Self::standardize(image), dims)
    }
    fn backward(&self, cache: &StackCache, grad_features: Vec<f32>, grad_params: &mut [f32]) {
        self.stack.backward(cache, grad_features, grad_params)
    }
    fn params(&self) -> &[f32] {
        self.stack.params()
    }
    fn params_mut(&mut self) -> &mut [f32] {
        self.stack.params_mut()
    }
    fn state(&self) -> BackboneState {
        BackboneState {
            kind: Self::KIND.to_string(),
            layers: self.stack.specs().to_vec(),
            params: self.stack.params().to_vec(),
        }
    }
    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Externally trained feature extractor, imported as a conv-stack weights
/// file (the JSON form of [`BackboneState`]).
#[derive(Debug, Clone)]
pub struct ImportedBackbone {
    kind: String,
    stack: ConvStack,
}

impl ImportedBackbone {
    pub fn load(kind: &str, path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "{kind} backbone weights file {} not found",
                path.display()
            )));
        }
        let mut state = BackboneState::read(path)?;
        if state.kind != kind {
            log::warn!("weights file declares kind {:?}; using it as {kind:?}", state.kind);
        }
        state.kind = kind.to_string();
        Self::from_state(state)
    }

    fn from_state(state: BackboneState) -> Result<Self> {
        Ok(Self {
            kind: state.kind,
            stack: ConvStack::new(state.layers, state.params)?,
        })
    }
}

impl Backbone for ImportedBackbone {
    fn kind(&self) -> &str {
        &self.kind
    }
    delegate_stack!();
}

#[derive(Debug, Clone, Default)]
pub struct BackboneOptions {
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

pub trait BackboneFactory: Send + Sync {
    fn build(&self, opts: &BackboneOptions) -> Result<Box<dyn Backbone>>;
    fn restore(&self, state: BackboneState) -> Result<Box<dyn Backbone>>;
}

struct TinyFactory;

impl BackboneFactory for TinyFactory {
    fn build(&self, opts: &BackboneOptions) -> Result<Box<dyn Backbone>> {
        Ok(Box::new(TinyConvNet::new(opts.seed)))
    }

    fn restore(&self, state: BackboneState) -> Result<Box<dyn Backbone>> {
        Ok(Box::new(TinyConvNet::from_state(state)?))
    }
}

struct PretrainedFactory {
    kind: &'static str,
}

impl BackboneFactory for PretrainedFactory {
    fn build(&self, opts: &BackboneOptions) -> Result<Box<dyn Backbone>> {
        let path = opts.weights.as_ref().ok_or_else(|| {
            Error::Config(format!("backbone {:?} requires backbone_weights", self.kind))
        })?;
        Ok(Box::new(ImportedBackbone::load(self.kind, path)?))
    }

    fn restore(&self, state: BackboneState) -> Result<Box<dyn Backbone>> {
        Ok(Box::new(ImportedBackbone::from_state(state)?))
    }
}

pub struct BackboneRegistry {
    factories: BTreeMap<String, Box<dyn BackboneFactory>>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        reg.register(TinyConvNet::KIND, Box::new(TinyFactory));
        for kind in ["resnet101", "densenet201", "seresnext"] {
            reg.register(kind, Box::new(PretrainedFactory { kind }));
        }
        reg
    }

    pub fn register(&mut self, name: &str, factory: Box<dyn BackboneFactory>) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    fn factory(&self, kind: &str) -> Result<&dyn BackboneFactory> {
        self.factories.get(kind).map(Box::as_ref).ok_or_else(|| {
            Error::Config(format!(
                "unsupported backbone {kind:?} (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn build(&self, kind: &str, opts: &BackboneOptions) -> Result<Box<dyn Backbone>> {
        self.factory(kind)?.build(opts)
    }

    pub fn restore(&self, state: BackboneState) -> Result<Box<dyn Backbone>> {
        self.factory(&state.kind)?.restore(state)
    }
}
