use super::LayerParams;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "rarefy-checkpoint/1";

/// SHA-256 of the canonical (sorted-key, compact) JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Parameter checkpoint: per-layer kinds, hyperparameters and values plus
/// the network configuration it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub layers: Vec<LayerParams>,
}

impl Checkpoint {
    pub fn new<T: Serialize>(config: &T, seed: u64, layers: Vec<LayerParams>) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash(config)?,
            seed,
            config: serde_json::to_value(config)?,
            layers,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and checks the format tag, the stored hash against the
    /// embedded config, and every layer's array lengths.
    pub fn parse(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        let found = config_hash(&ck.config)?;
        if found != ck.config_hash {
            return Err(Error::ChecksumMismatch { expected: ck.config_hash.clone(), found });
        }
        if let Some(bad) = ck.layers.iter().position(|l| !l.is_consistent()) {
            return Err(Error::Parse(format!("layer {bad} has inconsistent parameter arrays")));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
