//! Versioned checkpoint container: model config, every parameter tensor
//! keyed by its stable path name, normalization statistics, split ratios,
//! and the training seed. The body is guarded by a SHA-256 checksum so a
//! corrupted file fails loudly instead of producing quiet garbage.
//!
//! Serialization is JSON; `f64` values round-trip bit-exactly through the
//! shortest-representation formatter, so save -> load -> forward is
//! bit-identical in eval mode.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ChannelMeta, NormalizationStats};
use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, StgnnModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub channels: Vec<ChannelMeta>,
    pub stats: NormalizationStats,
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
    pub params: Vec<NamedTensor>,
}

#[derive(Deserialize)]
struct Envelope<'a> {
    version: u32,
    checksum: String,
    #[serde(borrow)]
    body: &'a serde_json::value::RawValue,
}

impl Checkpoint {
    pub fn from_model(
        model: &StgnnModel,
        channels: Vec<ChannelMeta>,
        stats: NormalizationStats,
        split_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            model: model.config.clone(),
            channels,
            stats,
            split_ratios,
            seed,
            params,
        }
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn instantiate(&self) -> Result<StgnnModel> {
        let mut model = StgnnModel::new(self.model.clone(), self.channels.len(), self.seed)?;
        if self.params.len() != model.store().len() {
            return Err(CoreError::Integrity(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for named in &self.params {
            let id = model.store().find(&named.name).ok_or_else(|| {
                CoreError::Integrity(format!("checkpoint parameter {} unknown to model", named.name))
            })?;
            let tensor = Tensor::new(named.shape.clone(), named.data.clone()).map_err(|_| {
                CoreError::Integrity(format!("checkpoint parameter {} is malformed", named.name))
            })?;
            if tensor.shape() != model.store().get(id).shape() {
                return Err(CoreError::Integrity(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    named.name,
                    tensor.shape(),
                    model.store().get(id).shape()
                )));
            }
            *model.store_mut().get_mut(id) = tensor;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(self)?;
        let checksum = sha256_hex(body.as_bytes());
        let file = format!(
            "{{\"version\":{CHECKPOINT_VERSION},\"checksum\":\"{checksum}\",\"body\":{body}}}"
        );
        std::fs::write(path, file).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let envelope: Envelope = serde_json::from_str(&text)
            .map_err(|e| CoreError::Integrity(format!("unreadable checkpoint envelope: {e}")))?;
        if envelope.version != CHECKPOINT_VERSION {
            return Err(CoreError::Integrity(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                envelope.version
            )));
        }
        let body = envelope.body.get();
        let checksum = sha256_hex(body.as_bytes());
        if checksum != envelope.checksum {
            return Err(CoreError::Integrity(
                "checkpoint checksum mismatch (file corrupted?)".into(),
            ));
        }
        Ok(serde_json::from_str(body)?)
    }

    /// Indices of electric channels in this checkpoint's channel order.
    pub fn electric_indices(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.subsystem == crate::data::Subsystem::Electric)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subsystem;

    fn toy_checkpoint() -> (StgnnModel, Checkpoint) {
        let config = ModelConfig {
            w: 6,
            h: 1,
            block_count: 1,
            chebyshev_order: 1,
            spe_seq_layers: 1,
            hidden_width: 3,
            embed_dim: 2,
            dropout: 0.0,
            target_channels: vec![0, 1],
            ..ModelConfig::default()
        };
        let model = StgnnModel::new(config, 4, 17).unwrap();
        let channels = vec![
            ChannelMeta::new("e0", Subsystem::Electric, 1),
            ChannelMeta::new("e1", Subsystem::Electric, 1),
            ChannelMeta::new("h0", Subsystem::Hydraulic, 1),
            ChannelMeta::new("h1", Subsystem::Hydraulic, 1),
        ];
        let stats = NormalizationStats {
            per_channel_min: vec![0.0; 4],
            per_channel_max: vec![1.0; 4],
        };
        let ckpt = Checkpoint::from_model(&model, channels, stats, (0.7, 0.15, 0.15), 17);
        (model, ckpt)
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (model, ckpt) = toy_checkpoint();
        let dir = std::env::temp_dir().join("stgnn-core-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let rebuilt = loaded.instantiate().unwrap();
        for ((_, _, a), (_, _, b)) in model.store().iter().zip(rebuilt.store().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (_, ckpt) = toy_checkpoint();
        let dir = std::env::temp_dir().join("stgnn-core-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.json");
        ckpt.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // Flip one digit inside the body.
        let pos = text.find("\"body\"").unwrap() + 30;
        let bad = if text.as_bytes()[pos] == b'3' { '4' } else { '3' };
        text.replace_range(pos..pos + 1, &bad.to_string());
        std::fs::write(&path, text).unwrap();
        match Checkpoint::load(&path) {
            Err(CoreError::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (_, ckpt) = toy_checkpoint();
        let dir = std::env::temp_dir().join("stgnn-core-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("version.json");
        ckpt.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, text).unwrap();
        match Checkpoint::load(&path) {
            Err(CoreError::Integrity(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
