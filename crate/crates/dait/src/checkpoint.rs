//! Checkpoints: an opaque little-endian weight blob plus a JSON manifest
//! carrying the config snapshot, epoch, metrics and a SHA-256 of the blob.
//!
//! A checkpoint reference is the directory holding `weights.bin` and
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dait_core::nn::{checksum, Parameters};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{DaitError, Result};

const MAGIC: &[u8; 8] = b"DAITW001";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Fitted VLM projection head only.
    Projection,
    /// Projection head + intermediate teacher.
    Stage1,
    /// Student + channel alignment.
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub len: usize,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub groups: Vec<GroupEntry>,
    /// Hex SHA-256 of `weights.bin`.
    pub digest: String,
    pub class_names: Vec<String>,
    /// Checkpoint this one was trained from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<PathBuf>,
    pub config: RunConfig,
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(WEIGHTS_FILE).is_file()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn encode(groups: &[(&str, &dyn Parameters)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, params) in groups {
        let mut values = Vec::new();
        params.visit(&mut |p| values.extend_from_slice(&p.value));
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Vec<f64>>> {
    let bad = |m: &str| DaitError::Checkpoint(format!("malformed weight blob: {m}"));
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    let mut out = BTreeMap::new();
    loop {
        let Ok(len) = take(4) else { break };
        let name_len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("group name"))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(count * 8)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.insert(name, values);
    }
    Ok(out)
}

/// Write the named parameter groups and a manifest into `dir`.
pub fn save(
    dir: &Path,
    kind: CheckpointKind,
    groups: &[(&str, &dyn Parameters)],
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    class_names: &[String],
    parent: Option<PathBuf>,
    config: &RunConfig,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| DaitError::io(dir, e))?;
    let blob = encode(groups);
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &blob).map_err(|e| DaitError::io(&weights, e))?;
    let entries = groups
        .iter()
        .map(|(name, p)| {
            let mut len = 0;
            p.visit(&mut |q| len += q.len());
            GroupEntry { name: name.to_string(), len, checksum: checksum(*p) }
        })
        .collect();
    let manifest = Manifest {
        kind,
        epoch,
        metrics,
        groups: entries,
        digest: digest(&blob),
        class_names: class_names.to_vec(),
        parent,
        config: config.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| DaitError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DaitError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DaitError::Checkpoint(format!("{}: {e}", path.display())))
}

/// A loaded checkpoint whose blob digest has been verified.
pub struct Loaded {
    pub manifest: Manifest,
    groups: BTreeMap<String, Vec<f64>>,
}

impl Loaded {
    /// Overwrite `params` with the stored values of `group`.
    pub fn restore(&self, group: &str, params: &mut dyn Parameters) -> Result<()> {
        let values = self
            .groups
            .get(group)
            .ok_or_else(|| DaitError::Checkpoint(format!("group `{group}` not in checkpoint")))?;
        let mut expected = 0;
        params.visit(&mut |p| expected += p.len());
        if expected != values.len() {
            return Err(DaitError::Checkpoint(format!(
                "group `{group}` holds {} values, model expects {expected}",
                values.len()
            )));
        }
        let mut pos = 0;
        params.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[pos..pos + n]);
            pos += n;
        });
        Ok(())
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.groups.contains_key(group)
    }
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&path).map_err(|e| DaitError::io(&path, e))?;
    let d = digest(&blob);
    if d != manifest.digest {
        return Err(DaitError::Checkpoint(format!("{}: digest {d} does not match manifest {}", path.display(), manifest.digest)));
    }
    Ok(Loaded { manifest, groups: decode(&blob)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dait_core::nn::Linear;
    use dait_core::rng::seeded;

    #[test]
    fn save_load_restores_weights_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("a.ckpt");
        let lin = Linear::new(3, 2, &mut seeded(1));
        let cfg = RunConfig::default();
        save(&ck, CheckpointKind::Projection, &[("f_vlm", &lin)], 4, BTreeMap::new(), &[], None, &cfg).unwrap();
        let mut other = Linear::new(3, 2, &mut seeded(2));
        assert_ne!(checksum(&other), checksum(&lin));
        let loaded = load(&ck).unwrap();
        loaded.restore("f_vlm", &mut other).unwrap();
        assert_eq!(checksum(&other), checksum(&lin));
        assert_eq!(loaded.manifest.epoch, 4);
        assert!(loaded.restore("student", &mut other).is_err());

        let mut blob = fs::read(ck.join(WEIGHTS_FILE)).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        fs::write(ck.join(WEIGHTS_FILE), blob).unwrap();
        assert!(matches!(load(&ck), Err(DaitError::Checkpoint(_))));
    }
}
