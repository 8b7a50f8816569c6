//! Versioned JSON checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::TransitionModel;
use crate::error::{Error, Result};
use crate::madlearn::EmbeddingModel;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model payload tagged with its format version and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: T,
}

pub type EmbeddingCheckpoint = Checkpoint<EmbeddingModel>;
pub type TransitionCheckpoint = Checkpoint<TransitionModel>;

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(model: T, config_hash: impl Into<String>, seed: u64) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, config_hash: config_hash.into(), seed, model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            version: u32,
        }
        let v: Version = serde_json::from_str(text)?;
        if v.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: v.version, expected: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::MlpParams;
    use crate::norms::DistanceHead;

    #[test]
    fn round_trip_and_version_gate() {
        let model = EmbeddingModel { encoder: MlpParams::identity(2), head: DistanceHead::l1() };
        let ckpt = Checkpoint::new(model, "abc", 3);
        let text = ckpt.to_json().unwrap();
        assert_eq!(EmbeddingCheckpoint::from_json(&text).unwrap(), ckpt);
        let bumped = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            EmbeddingCheckpoint::from_json(&bumped),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
