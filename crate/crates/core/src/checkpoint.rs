//! Self-describing JSON checkpoint: a kind tag, a free-form config header and
//! named parameter arrays with their shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, LwgrError, Result};
use crate::numerics::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub header: serde_json::Value,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(kind: &str, header: serde_json::Value, store: &ParamStore<T>) -> Result<Self> {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.to_f64_vec(),
            })
            .collect();
        Ok(Self {
            kind: kind.to_string(),
            header,
            params,
        })
    }

    /// Writes every stored array into the same-named parameter of `store`.
    /// With `strict`, every parameter of the store must be present.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<()> {
        let mut seen = 0;
        for p in &self.params {
            if store.id(&p.name).is_some() {
                store.set_values(&p.name, &p.shape, p.values.iter().map(|&v| T::lit(v)).collect())?;
                seen += 1;
            } else if strict {
                return Err(contract("checkpoint", format!("unexpected parameter {}", p.name)));
            }
        }
        if strict && seen != store.len() {
            return Err(contract("checkpoint", format!("checkpoint covers {seen} of {} parameters", store.len())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// SHA-256 of the parameter names, shapes and bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
