//! Coordinated expert training: a two-expert model on top of the frozen
//! anchor, where only the new expert's FFNs and router row learn.

pub mod bundle;

use std::collections::BTreeMap;

use crate::clihub::checkpoint::shared_fingerprint;
use crate::corpora::{DomainCorpus, SplitKind};
use crate::error::{Error, Result};
use crate::lmcore::config::ModelConfig;
use crate::lmcore::embed::mean_layer_embedding;
use crate::lmcore::model::{router_row_name, Ffn, Transformer, PUBLIC_EXPERT};
use crate::lmcore::train::{train, verify_frozen, TrainConfig, TrainLog};
use crate::numcore::tensor::{Role, TensorRecord};

pub use bundle::{BundleMetadata, ExpertBundle};

/// Documents used to estimate a router embedding, at most this many.
pub const EMBEDDING_SAMPLE: usize = 256;

/// Pretrains a dense anchor on public documents, then sets the public router
/// row of every layer to the mean pooled embedding of `embed_docs`. The
/// result is returned fully frozen.
pub fn pretrain_anchor(config: ModelConfig, docs: &[Vec<u8>], embed_docs: &[Vec<u8>], cfg: &TrainConfig, init_seed: u64) -> Result<(Transformer, TrainLog)> {
    let mut model = Transformer::init(config, init_seed)?;
    model.set_trainable(|t| t.role != Role::RouterRow);
    let log = train(&mut model, vec![docs], cfg)?;
    model.freeze_all();
    set_public_router(&mut model, embed_docs)?;
    Ok((model, log))
}

/// Sets `r_pub` at every layer from the public sample.
pub fn set_public_router(model: &mut Transformer, public_docs: &[Vec<u8>]) -> Result<()> {
    let r = init_router_embedding(model, public_docs)?;
    for (block, row) in model.blocks.iter_mut().zip(r) {
        block.moe.router[0].values = row;
    }
    Ok(())
}

/// `r_i` per layer: the average over `docs` of each document's mean pooled
/// expert-block input under the anchor.
pub fn init_router_embedding(anchor: &Transformer, docs: &[Vec<u8>]) -> Result<Vec<Vec<f32>>> {
    mean_layer_embedding(anchor, docs)
}

/// First documents of the train split, capped at [`EMBEDDING_SAMPLE`].
pub fn embedding_sample(corpus: &DomainCorpus) -> Vec<Vec<u8>> {
    let mut docs = corpus.docs(SplitKind::Train);
    docs.truncate(EMBEDDING_SAMPLE);
    docs
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel {
    pub model: Transformer,
    pub expert_id: String,
    pub anchor_fingerprint: String,
    anchor_hashes: BTreeMap<String, String>,
}

fn is_branch_trainable(t: &TensorRecord, id: &str) -> bool {
    let expert_prefix = format!(".experts.{id}.");
    let router_suffix = format!(".router.{id}");
    t.name.starts_with("layers.") && (t.name.contains(&expert_prefix) || t.name.ends_with(&router_suffix))
}

/// Builds `[pub, id]` at every layer with both FFNs copied from the anchor,
/// router rows `[r_pub, r_i]`, zero biases and `top_k = 2`. Only the new
/// expert's FFNs and router rows are trainable.
pub fn init_branch(anchor: &Transformer, expert_id: &str, router_init: Vec<Vec<f32>>) -> Result<BranchModel> {
    if anchor.roster != [PUBLIC_EXPERT] {
        return Err(Error::Input(format!("branching needs a dense anchor, got roster {:?}", anchor.roster)));
    }
    if expert_id == PUBLIC_EXPERT {
        return Err(Error::Input("the public expert id is reserved".into()));
    }
    let h = anchor.config.hidden_dim;
    if router_init.len() != anchor.blocks.len() || router_init.iter().any(|r| r.len() != h) {
        return Err(Error::Input(format!("router init must be {} vectors of width {h}", anchor.blocks.len())));
    }
    let mut model = anchor.clone();
    model.freeze_all();
    let ffns: Vec<Ffn> = model.blocks.iter().map(|b| b.moe.experts[0].clone()).collect();
    let rows = router_init
        .into_iter()
        .enumerate()
        .map(|(l, r)| TensorRecord::new(router_row_name(l, expert_id), vec![h], r, Role::RouterRow))
        .collect();
    model.push_expert(expert_id, ffns, rows, 0.0)?;
    model.set_top_k(2)?;
    let id = expert_id.to_string();
    model.set_trainable(|t| is_branch_trainable(t, &id));
    let anchor_hashes = anchor.tensors().into_iter().map(|t| (t.name.clone(), t.content_hash())).collect();
    Ok(BranchModel {
        model,
        expert_id: expert_id.to_string(),
        anchor_fingerprint: shared_fingerprint(anchor),
        anchor_hashes,
    })
}

impl BranchModel {
    /// Extracts the new expert as a bundle.
    pub fn bundle(&self, metadata: BundleMetadata) -> ExpertBundle {
        let idx = 1;
        let mut config = self.model.config;
        config.n_experts = 1;
        config.top_k = 1;
        ExpertBundle {
            expert_id: self.expert_id.clone(),
            config,
            ffns: self
                .model
                .blocks
                .iter()
                .map(|b| {
                    let mut f = b.moe.experts[idx].clone();
                    for t in f.tensors_mut() {
                        t.trainable = false;
                        t.grad = None;
                    }
                    f
                })
                .collect(),
            router_rows: self
                .model
                .blocks
                .iter()
                .map(|b| {
                    let mut r = b.moe.router[idx].clone();
                    r.trainable = false;
                    r.grad = None;
                    r
                })
                .collect(),
            bias: 0.0,
            anchor_fingerprint: self.anchor_fingerprint.clone(),
            metadata,
        }
    }

    /// Checks that every inherited tensor still matches the anchor's hash.
    pub fn verify_anchor(&self) -> Result<()> {
        verify_frozen(&self.model, &self.anchor_hashes)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.model.trainable_names()
    }
}

/// Trains the branch's new expert on the corpus train split and returns the
/// bundle. The inherited weights are verified against the anchor afterwards.
pub fn train_expert(branch: &mut BranchModel, corpus: &DomainCorpus, cfg: &TrainConfig) -> Result<(ExpertBundle, TrainLog)> {
    let docs = corpus.docs(SplitKind::Train);
    if docs.is_empty() {
        return Err(Error::Input(format!("corpus {} has an empty train split", corpus.domain_id)));
    }
    let log = train(&mut branch.model, vec![&docs], cfg)?;
    branch.verify_anchor()?;
    let meta = BundleMetadata {
        corpus_id: corpus.domain_id.clone(),
        corpus_sha256: corpus.sha256(),
        steps: cfg.steps,
        seed: cfg.seed,
        final_loss: log.final_loss(),
        flops: log.flops,
    };
    Ok((branch.bundle(meta), log))
}
