//! Crash-safe checkpoints: one JSON file per generation, written then renamed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evolution::{EvolutionConfig, RunState, Variant};
use crate::genome::ScenarioKind;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("no checkpoint in {0}")]
    NoCheckpoint(PathBuf),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
}

/// Everything needed to continue a run: population with fitness, mutation
/// rate, RNG state and the stats history, all inside `state`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub format: u32,
    pub variant: Variant,
    pub scenario: ScenarioKind,
    /// Digest of the evolution settings the run started with.
    pub config_digest: String,
    pub state: RunState,
}

impl CheckpointRecord {
    pub fn new(variant: Variant, scenario: ScenarioKind, cfg: &EvolutionConfig, state: RunState) -> Self {
        CheckpointRecord {
            format: CHECKPOINT_FORMAT,
            variant,
            scenario,
            config_digest: config_digest(cfg),
            state,
        }
    }

    pub fn generation(&self) -> usize {
        self.state.generation
    }

    /// Fails unless this record belongs to a run with these settings.
    pub fn check_matches(
        &self,
        variant: Variant,
        scenario: ScenarioKind,
        cfg: &EvolutionConfig,
    ) -> Result<(), CheckpointError> {
        if self.variant == variant && self.scenario == scenario && self.config_digest == config_digest(cfg) {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch)
        }
    }
}

pub fn config_digest(cfg: &EvolutionConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")))
}

pub fn checkpoint_file_name(generation: usize) -> String {
    format!("checkpoint-g{generation:06}.json")
}

fn parse_generation(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("checkpoint-g")?.strip_suffix(".json")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Writes `record` to `dir` via a temporary file and rename.
pub fn checkpoint_write(record: &CheckpointRecord, dir: &Path) -> Result<PathBuf, CheckpointError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CheckpointError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let name = checkpoint_file_name(record.generation());
    let path = dir.join(&name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let bytes = serde_json::to_vec(record).expect("checkpoint serializes");
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(path)
}

/// Path of the highest-generation checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf, CheckpointError> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::NoCheckpoint(dir.to_path_buf()))
        }
        Err(source) => {
            return Err(CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name();
            parse_generation(name.to_str()?).map(|g| (g, e.path()))
        })
        .max_by_key(|(g, _)| *g)
        .map(|(_, p)| p)
        .ok_or_else(|| CheckpointError::NoCheckpoint(dir.to_path_buf()))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointRecord, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let record: CheckpointRecord = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if record.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unsupported format {}", record.format)));
    }
    if record.state.members.is_empty() || record.state.history.len() != record.state.generation + 1 {
        return Err(corrupt("population or history inconsistent with generation".into()));
    }
    Ok(record)
}

/// Loads the latest checkpoint in `dir`.
pub fn checkpoint_resume(dir: &Path) -> Result<CheckpointRecord, CheckpointError> {
    read_checkpoint(&latest_checkpoint(dir)?)
}
