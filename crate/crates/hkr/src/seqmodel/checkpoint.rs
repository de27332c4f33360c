//! Checkpoint serialization: JSON with shortest-round-trip floats, so a
//! save/load cycle is bit-exact.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::seqmodel::{DecoderModel, Dims, EmbedOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub embed_op: EmbedOp,
    /// Flat tensors keyed by canonical parameter name.
    pub tensors: BTreeMap<String, Vec<f64>>,
    /// FNV-1a fingerprint of the owner key (private-key deployments only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_fingerprint: Option<String>,
    /// Planted signature target and margin, when sign loss was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(
        model: &DecoderModel,
        private_key: Option<&SecretKey>,
        signature: Option<(&[f64], f64)>,
    ) -> Checkpoint {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, t)| (name.to_string(), t.data.clone()))
            .collect();
        Checkpoint {
            version: 1,
            dims: model.dims,
            embed_op: model.embed_op,
            tensors,
            key_fingerprint: private_key.map(|k| k.fingerprint()),
            signature: signature.map(|(g, _)| g.to_vec()),
            gamma: signature.map(|(_, gamma)| gamma),
        }
    }

    pub fn to_model(&self) -> Result<DecoderModel> {
        let mut model = DecoderModel::init(self.dims, self.embed_op, 0);
        for (name, tensor) in model.params_mut() {
            let data = self.tensors.get(name).ok_or_else(|| {
                HkrError::Checkpoint(format!("missing tensor {name}"))
            })?;
            if data.len() != tensor.data.len() {
                return Err(HkrError::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    data.len(),
                    tensor.data.len()
                )));
            }
            tensor.data.copy_from_slice(data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| HkrError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != 1 {
            return Err(HkrError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// FNV-1a hash of the serialized checkpoint, for reproducibility checks.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        crate::numcore::fnv1a_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::{generate_key, KeyVariant};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dims = Dims { v: 10, e: 4, n: 8, d: 6, a: 5, r: 3 };
        let model = DecoderModel::init(dims, EmbedOp::Add, 42);
        let key = generate_key("Alice", 42, 8, KeyVariant::Binary).unwrap();
        let g = vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let ckpt = Checkpoint::from_model(&model, Some(&key), Some((&g, 0.1)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_model().unwrap(), model);
        assert_eq!(loaded.key_fingerprint.unwrap(), key.fingerprint());
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dims = Dims { v: 5, e: 3, n: 4, d: 5, a: 3, r: 2 };
        let model = DecoderModel::init(dims, EmbedOp::None, 1);
        let mut ckpt = Checkpoint::from_model(&model, None, None);
        ckpt.tensors.remove("out_w");
        assert!(ckpt.to_model().is_err());
    }
}
