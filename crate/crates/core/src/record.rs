//! Persisted experiment records and the append-only store holding them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::LayerSparsity;
use crate::tickets::{KlProfile, TicketMethod};
use crate::trainer::EpochStats;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the record-store root.
pub const STORE_ENV: &str = "SNN_LOTTERY_STORE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    /// Suite cell hash, when the record came from a suite.
    pub key: Option<String>,
    pub config: serde_json::Value,
    pub method: TicketMethod,
    pub loss: String,
    pub seed: u64,
    pub target_sparsity: Option<f64>,
    pub achieved_sparsity: f64,
    pub layer_sparsity: Vec<LayerSparsity>,
    pub trajectory: Vec<EpochStats>,
    pub final_test_accuracy: f64,
    pub mean_spikes_per_image: Option<f64>,
    /// Timesteps used for retraining and evaluation.
    pub timesteps: usize,
    pub search_timesteps: usize,
    pub t_early: Option<usize>,
    pub discovery_epoch: Option<usize>,
    pub eb_converged: Option<bool>,
    pub kl_profile: Option<KlProfile>,
    pub rewind_epoch: usize,
    pub round: Option<usize>,
    pub search_wall_seconds: f64,
    pub search_cpu_seconds: Option<f64>,
    pub retrain_wall_seconds: f64,
    pub end_to_end_seconds: f64,
    pub artifacts: Vec<PathBuf>,
    /// Set when the cell failed; the numeric fields are then meaningless.
    pub error: Option<String>,
}

impl Default for ExperimentRecord {
    fn default() -> Self {
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            key: None,
            config: serde_json::Value::Null,
            method: TicketMethod::Dense,
            loss: "cross-entropy".into(),
            seed: 0,
            target_sparsity: None,
            achieved_sparsity: 0.0,
            layer_sparsity: Vec::new(),
            trajectory: Vec::new(),
            final_test_accuracy: 0.0,
            mean_spikes_per_image: None,
            timesteps: 0,
            search_timesteps: 0,
            t_early: None,
            discovery_epoch: None,
            eb_converged: None,
            kl_profile: None,
            rewind_epoch: 0,
            round: None,
            search_wall_seconds: 0.0,
            search_cpu_seconds: None,
            retrain_wall_seconds: 0.0,
            end_to_end_seconds: 0.0,
            artifacts: Vec::new(),
            error: None,
        }
    }
}

impl ExperimentRecord {
    pub fn failed(key: Option<String>, config: serde_json::Value, method: TicketMethod, seed: u64, error: String) -> Self {
        Self {
            key,
            config,
            method,
            seed,
            error: Some(error),
            ..Self::default()
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(value).expect("JSON values always serialize");
    hex::encode(Sha256::digest(&canonical))
}

/// Writes `bytes` to `path` through a sibling temporary file. With
/// `overwrite` false an existing `path` is left alone and `Ok(false)` returned.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<bool> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    if overwrite {
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        return Ok(true);
    }
    let linked = fs::hard_link(&tmp, path);
    let _ = fs::remove_file(&tmp);
    match linked {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Directory of JSON records, one file per record, never overwritten.
#[derive(Clone, Debug)]
pub struct RecordStore {
    root: PathBuf,
}

impl RecordStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from `SNN_LOTTERY_STORE`, else `./snn-lottery-store`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(STORE_ENV).map_or_else(|| PathBuf::from("snn-lottery-store"), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.records_dir().join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).is_file()
    }

    pub fn get(&self, key: &str) -> Result<Option<ExperimentRecord>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(ExperimentRecord::from_json(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Stores `record` under its key, or under the hash of its contents when
    /// it has none. Returns the key; an existing record is kept.
    pub fn put(&self, record: &ExperimentRecord) -> Result<String> {
        let json = record.to_json()?;
        let key = match &record.key {
            Some(k) => k.clone(),
            None => hex::encode(Sha256::digest(json.as_bytes())),
        };
        write_atomic(&self.path_for(&key), json.as_bytes(), false)?;
        Ok(key)
    }

    /// Stores a failed cell beside its would-be record; a later run may retry
    /// the cell and replace this file.
    pub fn put_failure(&self, record: &ExperimentRecord) -> Result<()> {
        let key = record.key.clone().unwrap_or_else(|| "unkeyed".into());
        let path = self.records_dir().join(format!("{key}.failed.json"));
        write_atomic(&path, record.to_json()?.as_bytes(), true)?;
        Ok(())
    }

    /// Every record, failures included, ordered by file name.
    pub fn list(&self) -> Result<Vec<ExperimentRecord>> {
        let dir = self.records_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(dir, e)),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ExperimentRecord::from_json(&text)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_but_not_values() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":2,"a":1}"#).unwrap();
        let c: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":3}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn store_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        let mut rec = ExperimentRecord {
            key: Some("cell".into()),
            final_test_accuracy: 0.5,
            ..ExperimentRecord::default()
        };
        store.put(&rec).unwrap();
        rec.final_test_accuracy = 0.9;
        store.put(&rec).unwrap();
        assert_eq!(store.get("cell").unwrap().unwrap().final_test_accuracy, 0.5);
        assert_eq!(store.list().unwrap().len(), 1);
        assert!(store.get("missing").unwrap().is_none());
    }
}
