//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob.
//!
//! The fingerprint is SHA-256 over the config JSON, the tensor-table JSON and
//! the blob, in that order. Saves write a sibling temp directory and rename it
//! into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lmcore::config::ModelConfig;
use crate::lmcore::model::Transformer;
use crate::numcore::tensor::{Role, TensorRecord};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Anchor,
    Dense,
    Merged,
    ExpertBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    pub role: Role,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub config: ModelConfig,
    pub roster: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub fingerprint: String,
    /// Content fingerprint of each non-public expert, keyed by id.
    #[serde(default)]
    pub expert_fingerprints: BTreeMap<String, String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl CheckpointManifest {
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }
}

/// Lays records out back to back and returns the table and blob.
pub fn build_table(records: &[TensorRecord]) -> (Vec<TensorEntry>, Vec<u8>) {
    let total: usize = records.iter().map(|r| r.len() * 4).sum();
    let mut blob = Vec::with_capacity(total);
    let mut table = Vec::with_capacity(records.len());
    for r in records {
        let offset = blob.len() as u64;
        for v in &r.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        table.push(TensorEntry {
            name: r.name.clone(),
            shape: r.shape.clone(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
            role: r.role,
            trainable: r.trainable,
        });
    }
    (table, blob)
}

pub fn compute_fingerprint(config: &ModelConfig, table: &[TensorEntry], blob: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(table)?);
    h.update(blob);
    Ok(hex::encode(h.finalize()))
}

/// Fingerprint of a model in canonical form (all tensors frozen, no grads).
pub fn model_fingerprint(model: &Transformer) -> String {
    let mut records = model.to_records();
    for r in records.iter_mut() {
        r.trainable = false;
    }
    let (table, blob) = build_table(&records);
    compute_fingerprint(&model.config, &table, &blob).expect("config and table serialize")
}

/// Fingerprint of every tensor except router rows. Router tuning leaves it
/// unchanged, so bundles still attach to a tuned merge of their anchor.
pub fn shared_fingerprint(model: &Transformer) -> String {
    let records: Vec<TensorRecord> = model
        .to_records()
        .into_iter()
        .filter(|r| r.role != Role::RouterRow)
        .map(|mut r| {
            r.trainable = false;
            r
        })
        .collect();
    let (table, blob) = build_table(&records);
    compute_fingerprint(&model.config, &table, &blob).expect("config and table serialize")
}

/// Name-independent content hash of one expert: its FFNs and router rows at
/// every layer. A bundle and the merged copy of it hash identically.
pub fn expert_fingerprint(ffn_and_rows: &[&TensorRecord]) -> String {
    let mut h = Sha256::new();
    for t in ffn_and_rows {
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.values {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn model_expert_fingerprints(model: &Transformer) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (e, id) in model.roster.iter().enumerate().skip(1) {
        let mut parts: Vec<&TensorRecord> = Vec::new();
        for b in &model.blocks {
            parts.extend(b.moe.experts[e].tensors());
            parts.push(&b.moe.router[e]);
        }
        out.insert(id.clone(), expert_fingerprint(&parts));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn temp_sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    dir.with_file_name(format!(".{name}.{tag}-{}-{nanos}", std::process::id()))
}

/// Writes `records` as a checkpoint directory at `dir`, replacing any
/// existing one atomically.
pub fn save_checkpoint(
    dir: &Path,
    kind: ArtifactKind,
    config: &ModelConfig,
    roster: &[String],
    records: &[TensorRecord],
    expert_fingerprints: BTreeMap<String, String>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<CheckpointManifest> {
    let (tensors, blob) = build_table(records);
    let fingerprint = compute_fingerprint(config, &tensors, &blob)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind,
        config: *config,
        roster: roster.to_vec(),
        tensors,
        fingerprint,
        expert_fingerprints,
        metadata,
    };
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(dir, "tmp");
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_file(&tmp.join(BLOB_FILE), &blob)?;
    write_file(&tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    if dir.exists() {
        let old = temp_sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionSkew {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn check_table(table: &[TensorEntry], blob_len: u64) -> Result<()> {
    let mut cursor = 0u64;
    for t in table {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        let want = t.shape.iter().product::<usize>() as u64 * 4;
        if t.length != want || t.shape.contains(&0) {
            return Err(Error::Checkpoint(format!("tensor {} length {} does not match shape {:?}", t.name, t.length, t.shape)));
        }
        if t.offset != cursor {
            return Err(Error::Checkpoint(format!("tensor {} starts at {}, expected {cursor}", t.name, t.offset)));
        }
        cursor += t.length;
    }
    if cursor != blob_len {
        return Err(Error::Checkpoint(format!("tensor table covers {cursor} bytes, blob has {blob_len}")));
    }
    Ok(())
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<TensorRecord>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if (blob.len() as u64) < expected {
        return Err(Error::TruncatedBlob {
            path,
            expected,
            found: blob.len() as u64,
        });
    }
    check_table(&manifest.tensors, blob.len() as u64)?;
    let computed = compute_fingerprint(&manifest.config, &manifest.tensors, &blob)?;
    if computed != manifest.fingerprint {
        return Err(Error::FingerprintMismatch {
            path: dir.to_path_buf(),
            stored: manifest.fingerprint.clone(),
            computed,
        });
    }
    let records = manifest
        .tensors
        .iter()
        .map(|t| {
            let bytes = &blob[t.offset as usize..(t.offset + t.length) as usize];
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let mut r = TensorRecord::new(t.name.clone(), t.shape.clone(), values, t.role);
            r.trainable = t.trainable;
            r
        })
        .collect();
    Ok((manifest, records))
}

pub fn save_model(model: &Transformer, dir: &Path, kind: ArtifactKind, metadata: BTreeMap<String, serde_json::Value>) -> Result<CheckpointManifest> {
    model.check()?;
    save_checkpoint(
        dir,
        kind,
        &model.config,
        &model.roster,
        &model.to_records(),
        model_expert_fingerprints(model),
        metadata,
    )
}

pub fn load_model(dir: &Path) -> Result<(Transformer, CheckpointManifest)> {
    let (manifest, records) = load_checkpoint(dir)?;
    if manifest.kind == ArtifactKind::ExpertBundle {
        return Err(Error::Checkpoint(format!("{} holds an expert bundle, not a model", dir.display())));
    }
    let model = Transformer::from_records(manifest.config, manifest.roster.clone(), records)?;
    Ok((model, manifest))
}
