//! Versioned JSON checkpoints. Readers ignore unknown fields so newer writers
//! stay loadable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneRegistry, BackboneState, ConceptModel, ConceptPhraseEmbedding, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::vocab::ConceptVocabulary;

pub const CHECKPOINT_FORMAT: &str = "coherent-concepts-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run context stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// Training stage that produced the weights (0 = initialization).
    pub stage: u8,
    pub epoch: usize,
    pub preprocess_mode: String,
    pub class_names: Vec<String>,
    /// Echo of the run configuration the weights were trained with.
    #[serde(default)]
    pub run_config: String,
    #[serde(default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the run configuration echo.
    pub config_hash: String,
    pub meta: CheckpointMeta,
    pub model: ModelConfig,
    pub vocab: ConceptVocabulary,
    pub phrases: ConceptPhraseEmbedding,
    pub backbone: BackboneState,
    pub encoder: Vec<f32>,
    pub visual_embedding: Vec<f32>,
    pub phrase_embedding: Vec<f32>,
    pub classifier: Vec<f32>,
}

pub(crate) fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &ConceptModel, meta: CheckpointMeta) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&meta.run_config),
            meta,
            model: model.config.clone(),
            vocab: model.vocab.clone(),
            phrases: model.phrases.clone(),
            backbone: model.backbone.state(),
            encoder: model.encoder.clone(),
            visual_embedding: model.visual_embedding.clone(),
            phrase_embedding: model.phrase_embedding.clone(),
            classifier: model.classifier.clone(),
        }
    }

    pub fn into_model(self, registry: &BackboneRegistry) -> Result<ConceptModel> {
        let backbone = registry.restore(self.backbone)?;
        let mut model = ConceptModel::new(self.model, self.vocab, self.phrases, backbone, 0)?;
        let groups = [
            (ParamGroup::Encoder, self.encoder),
            (ParamGroup::VisualEmbedding, self.visual_embedding),
            (ParamGroup::PhraseEmbedding, self.phrase_embedding),
            (ParamGroup::Classifier, self.classifier),
        ];
        for (group, values) in groups {
            let slot = model.group_mut(group);
            if slot.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "group {group} has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&values);
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_reader(std::io::BufReader::new(file))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: not a checkpoint (format tag {other:?})",
                    path.display()
                )))
            }
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version == 0 || version > u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}

impl ConceptModel {
    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        Checkpoint::from_model(self, meta).write(path)
    }

    pub fn load(path: &Path, registry: &BackboneRegistry) -> Result<(Self, CheckpointMeta)> {
        let ckpt = Checkpoint::read(path)?;
        let meta = ckpt.meta.clone();
        Ok((ckpt.into_model(registry)?, meta))
    }
}
