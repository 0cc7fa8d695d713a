//! Stage manifests: the completion markers that make every stage resumable.
//!
//! A stage writes its artifacts first and its manifest last (atomically), so
//! a manifest's existence implies the artifacts were fully written. On
//! resume, digests are re-verified before a stage is skipped; any mismatch
//! (or a config change) sends the stage back through a clean recompute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::records::{sha256_file, write_atomic, RecordError, ShardDigest};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// File name relative to the stage directory.
    pub file: String,
    pub records: u64,
    pub sha256: String,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub stage: String,
    pub config_hash: String,
    pub shards: Vec<ShardEntry>,
    pub complete: bool,
}

impl ShardManifest {
    pub fn new(stage: impl Into<String>, config_hash: impl Into<String>) -> Self {
        ShardManifest {
            stage: stage.into(),
            config_hash: config_hash.into(),
            shards: Vec::new(),
            complete: false,
        }
    }

    pub fn push(&mut self, file: impl Into<String>, digest: &ShardDigest) {
        self.shards.push(ShardEntry {
            file: file.into(),
            records: digest.records,
            sha256: digest.sha256.clone(),
            complete: true,
        });
    }

    pub fn record_count(&self) -> u64 {
        self.shards.iter().map(|s| s.records).sum()
    }

    /// Write the manifest atomically with the completion flag set.
    pub fn finalize(mut self, stage_dir: &Path) -> Result<ShardManifest, RecordError> {
        self.complete = self.shards.iter().all(|s| s.complete);
        let bytes = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        write_atomic(&stage_dir.join(MANIFEST_FILE), &bytes)?;
        Ok(self)
    }

    /// Load a manifest and verify it: completion flags set, config hash
    /// matching, and every listed file re-hashing to its recorded digest.
    pub fn load_verified(stage_dir: &Path, config_hash: &str) -> Option<ShardManifest> {
        let bytes = std::fs::read(stage_dir.join(MANIFEST_FILE)).ok()?;
        let manifest: ShardManifest = serde_json::from_slice(&bytes).ok()?;
        if !manifest.complete || manifest.config_hash != config_hash {
            return None;
        }
        for shard in &manifest.shards {
            if !shard.complete {
                return None;
            }
            match sha256_file(&stage_dir.join(&shard.file)) {
                Ok(digest) if digest == shard.sha256 => {}
                _ => return None,
            }
        }
        Some(manifest)
    }

    /// Paths of the manifest's shard files, in manifest order.
    pub fn shard_paths(&self, stage_dir: &Path) -> Vec<PathBuf> {
        self.shards.iter().map(|s| stage_dir.join(&s.file)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::write_jsonl;

    #[test]
    fn verify_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let digest = write_jsonl(&dir.path().join("shard-0000.jsonl"), [serde_json::json!({"a": 1})]).unwrap();
        let mut manifest = ShardManifest::new("test", "cfg");
        manifest.push("shard-0000.jsonl", &digest);
        manifest.finalize(dir.path()).unwrap();

        assert!(ShardManifest::load_verified(dir.path(), "cfg").is_some());
        assert!(ShardManifest::load_verified(dir.path(), "other-cfg").is_none());

        std::fs::write(dir.path().join("shard-0000.jsonl"), b"{\"a\":2}\n").unwrap();
        assert!(ShardManifest::load_verified(dir.path(), "cfg").is_none());
    }

    #[test]
    fn missing_manifest_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ShardManifest::load_verified(dir.path(), "cfg").is_none());
    }
}
