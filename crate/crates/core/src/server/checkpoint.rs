//! Global-model checkpoints.
//!
//! A checkpoint is one JSON document `{round, global, config_hash}` naming the
//! last aggregated round. File checkpoints are replaced atomically through a
//! temp-file rename, so a crash leaves either the old or the new document.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::server::config::FederationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    /// Last completed round.
    pub round: u64,
    pub global: ParameterVector,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))
    }

    /// Checks the checkpoint belongs to `cfg` and returns the global model
    /// with the index of the round to run next.
    pub fn resume_state(self, cfg: &FederationConfig) -> Result<(ParameterVector, u64)> {
        let expected = cfg.config_hash();
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {}",
                self.config_hash, expected
            )));
        }
        if self.global.dim() != cfg.param_dim() {
            return Err(Error::Checkpoint(format!(
                "checkpoint model has dimension {}, config expects {}",
                self.global.dim(),
                cfg.param_dim()
            )));
        }
        if self.round >= cfg.rounds {
            return Err(Error::Checkpoint(format!(
                "checkpoint round {} is beyond the configured {} rounds",
                self.round, cfg.rounds
            )));
        }
        Ok((self.global, self.round + 1))
    }
}

/// Where the coordinator persists checkpoints.
pub trait CheckpointStore: Send {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<()>;
    fn load(&self) -> Result<Checkpoint>;
}

#[derive(Debug, Clone)]
pub struct FileCheckpointStore {
    path: PathBuf,
}

impl FileCheckpointStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl CheckpointStore for FileCheckpointStore {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let bytes = checkpoint.to_bytes()?;
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    fn load(&self) -> Result<Checkpoint> {
        let bytes = fs::read(&self.path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", self.path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// In-memory store that survives coordinator restarts; clones share the
/// same slot.
#[derive(Debug, Clone, Default)]
pub struct MemoryCheckpointStore {
    slot: Arc<Mutex<Option<Vec<u8>>>>,
}

impl MemoryCheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl CheckpointStore for MemoryCheckpointStore {
    fn save(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let bytes = checkpoint.to_bytes()?;
        *self.slot.lock().expect("checkpoint slot poisoned") = Some(bytes);
        Ok(())
    }

    fn load(&self) -> Result<Checkpoint> {
        let slot = self.slot.lock().expect("checkpoint slot poisoned");
        let bytes = slot.as_ref().ok_or_else(|| Error::Checkpoint("no checkpoint stored".into()))?;
        Checkpoint::from_bytes(bytes)
    }
}

/// Loads the checkpoint at `path` and returns the global model and the next
/// round to run.
pub fn resume_from_checkpoint(path: &Path, cfg: &FederationConfig) -> Result<(ParameterVector, u64)> {
    FileCheckpointStore::new(path).load()?.resume_state(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::config::tests::sample;

    fn ckpt(round: u64, cfg: &FederationConfig) -> Checkpoint {
        Checkpoint {
            round,
            global: ParameterVector::new(vec![0.25, -1.5, 1e-17]).unwrap(),
            config_hash: cfg.config_hash(),
        }
    }

    #[test]
    fn resume_returns_next_round() {
        let mut cfg = sample();
        cfg.rounds = 10;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = FileCheckpointStore::new(&path);
        store.save(&ckpt(7, &cfg)).unwrap();
        let (global, next) = resume_from_checkpoint(&path, &cfg).unwrap();
        assert_eq!(next, 8);
        assert_eq!(global, ckpt(7, &cfg).global);
        assert!(!dir.path().join("ckpt.json.tmp").exists());
    }

    #[test]
    fn missing_truncated_and_foreign_checkpoints_fail() {
        let cfg = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        assert!(matches!(resume_from_checkpoint(&path, &cfg), Err(Error::Checkpoint(_))));

        let bytes = ckpt(1, &cfg).to_bytes().unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(resume_from_checkpoint(&path, &cfg), Err(Error::Checkpoint(_))));

        let mut other = cfg.clone();
        other.algorithm = crate::aggregation::AlgorithmConfig::ditto(1.0);
        FileCheckpointStore::new(&path).save(&ckpt(1, &other)).unwrap();
        let err = resume_from_checkpoint(&path, &cfg).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }

    #[test]
    fn memory_store_is_shared_between_clones() {
        let cfg = sample();
        let mut a = MemoryCheckpointStore::new();
        let b = a.clone();
        assert!(b.load().is_err());
        a.save(&ckpt(0, &cfg)).unwrap();
        assert_eq!(b.load().unwrap(), ckpt(0, &cfg));
    }
}
