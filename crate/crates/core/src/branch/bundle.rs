//! The portable unit a data owner ships: per-layer expert FFNs, router rows
//! and the fingerprint of the anchor they were trained against.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clihub::checkpoint::{expert_fingerprint, load_checkpoint, save_checkpoint, ArtifactKind, CheckpointManifest};
use crate::error::{Error, Result};
use crate::lmcore::config::ModelConfig;
use crate::lmcore::model::{bias_name, expert_tensor_name, router_row_name, validate_expert_id, Ffn};
use crate::numcore::tensor::{Role, TensorRecord};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub corpus_id: String,
    pub corpus_sha256: String,
    pub steps: usize,
    pub seed: u64,
    pub final_loss: Option<f32>,
    /// Training FLOPs spent on this expert.
    #[serde(default)]
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    pub expert_id: String,
    /// Config of the anchor the bundle was branched from.
    pub config: ModelConfig,
    pub ffns: Vec<Ffn>,
    pub router_rows: Vec<TensorRecord>,
    /// Suggested selection bias; the merge step may override it.
    pub bias: f32,
    pub anchor_fingerprint: String,
    pub metadata: BundleMetadata,
}

impl ExpertBundle {
    /// Name-independent content hash of the FFNs and router rows.
    pub fn fingerprint(&self) -> String {
        let mut parts: Vec<&TensorRecord> = Vec::new();
        for (ffn, row) in self.ffns.iter().zip(&self.router_rows) {
            parts.extend(ffn.tensors());
            parts.push(row);
        }
        expert_fingerprint(&parts)
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut out = Vec::new();
        for (l, (ffn, row)) in self.ffns.iter().zip(&self.router_rows).enumerate() {
            for t in ffn.renamed(l, &self.expert_id).tensors() {
                let mut t = t.clone();
                t.trainable = false;
                out.push(t);
            }
            let mut r = row.clone();
            r.name = router_row_name(l, &self.expert_id);
            r.grad = None;
            r.trainable = false;
            out.push(r);
            out.push(TensorRecord::new(bias_name(l, &self.expert_id), vec![1], vec![self.bias], Role::RouterBias));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        let mut meta = BTreeMap::new();
        meta.insert("anchor_fingerprint".into(), serde_json::Value::String(self.anchor_fingerprint.clone()));
        meta.insert("training".into(), serde_json::to_value(&self.metadata)?);
        let mut fps = BTreeMap::new();
        fps.insert(self.expert_id.clone(), self.fingerprint());
        save_checkpoint(dir, ArtifactKind::ExpertBundle, &self.config, std::slice::from_ref(&self.expert_id), &self.to_records(), fps, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, records) = load_checkpoint(dir)?;
        if manifest.kind != ArtifactKind::ExpertBundle || manifest.roster.len() != 1 {
            return Err(Error::Checkpoint(format!("{} is not an expert bundle", dir.display())));
        }
        let id = manifest.roster[0].clone();
        validate_expert_id(&id)?;
        let anchor_fingerprint = manifest
            .metadata
            .get("anchor_fingerprint")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("bundle lacks an anchor fingerprint".into()))?
            .to_string();
        let metadata: BundleMetadata = match manifest.metadata.get("training") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => BundleMetadata::default(),
        };
        let mut map: BTreeMap<String, TensorRecord> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
        let mut take = |name: String| map.remove(&name).ok_or_else(|| Error::Checkpoint(format!("bundle missing tensor {name}")));
        let mut ffns = Vec::new();
        let mut rows = Vec::new();
        let mut bias = 0.0;
        for l in 0..manifest.config.n_layers {
            ffns.push(Ffn {
                w_in: take(expert_tensor_name(l, &id, "w_in"))?,
                b_in: take(expert_tensor_name(l, &id, "b_in"))?,
                w_out: take(expert_tensor_name(l, &id, "w_out"))?,
                b_out: take(expert_tensor_name(l, &id, "b_out"))?,
            });
            rows.push(take(router_row_name(l, &id))?);
            bias = take(bias_name(l, &id))?.values[0];
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("bundle holds unexpected tensor {extra}")));
        }
        Ok(Self {
            expert_id: id,
            config: manifest.config,
            ffns,
            router_rows: rows,
            bias,
            anchor_fingerprint,
            metadata,
        })
    }
}
