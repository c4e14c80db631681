//! The anchor → experts → merge pipeline shared by the acceptance suite and
//! the desk-scale run.

use std::time::Instant;

use flexmerge::branch::{embedding_sample, init_branch, init_router_embedding, pretrain_anchor, train_expert, BranchModel, ExpertBundle};
use flexmerge::corpora::{make_corpus, DomainCorpus, SplitKind};
use flexmerge::lmcore::config::ModelConfig;
use flexmerge::lmcore::model::Transformer;
use flexmerge::lmcore::train::{TrainConfig, TrainLog};
use flexmerge::merge::{assemble, MergedModel};

pub const CLOSED: [&str; 3] = ["math_arith", "code_brackets", "news_templates"];
pub const EXPERT_IDS: [&str; 3] = ["math", "code", "news"];
/// Never used for training; the extraction control domain.
pub const UNSEEN: &str = "verse_lines";

#[derive(Debug, Clone)]
pub struct Scale {
    pub name: &'static str,
    pub model: ModelConfig,
    pub anchor: TrainConfig,
    pub expert: TrainConfig,
    pub n_docs: usize,
    pub corpus_seed: u64,
    pub init_seed: u64,
}

impl Scale {
    /// Two layers at width 64; about 0.06 s per anchor step on one core.
    pub fn scaled() -> Self {
        let train = TrainConfig {
            steps: 1000,
            batch_size: 8,
            seq_len: 128,
            base_lr: 3e-3,
            warmup_steps: 50,
            seed: 7,
            ..TrainConfig::default()
        };
        Self {
            name: "scaled",
            model: ModelConfig {
                n_layers: 2,
                hidden_dim: 64,
                n_heads: 4,
                ffn_dim: 256,
                max_seq_len: 128,
                ..ModelConfig::default()
            },
            anchor: train,
            expert: TrainConfig { steps: 600, ..train },
            n_docs: 2000,
            corpus_seed: 1,
            init_seed: 3,
        }
    }

    /// The default model and training configuration, 2000 steps per stage.
    pub fn desk() -> Self {
        let train = TrainConfig { seed: 7, ..TrainConfig::default() };
        Self {
            name: "desk",
            model: ModelConfig::default(),
            anchor: train,
            expert: train,
            n_docs: 2000,
            corpus_seed: 1,
            init_seed: 3,
        }
    }

    /// Same shapes and seeds with a handful of steps, for rerun checks.
    pub fn smoke(&self) -> Self {
        Self {
            name: "smoke",
            anchor: TrainConfig { steps: 12, warmup_steps: 2, ..self.anchor },
            expert: TrainConfig { steps: 8, warmup_steps: 2, ..self.expert },
            n_docs: 200,
            ..self.clone()
        }
    }
}

pub struct Pipeline {
    pub scale: Scale,
    pub public: DomainCorpus,
    pub closed: Vec<DomainCorpus>,
    pub anchor: Transformer,
    pub anchor_log: TrainLog,
    pub branches: Vec<BranchModel>,
    pub bundles: Vec<ExpertBundle>,
    pub expert_logs: Vec<TrainLog>,
    /// Default biases and default `top_k`.
    pub merged: MergedModel,
    pub seconds: f64,
}

impl Pipeline {
    pub fn build(scale: Scale) -> Self {
        let t0 = Instant::now();
        let public = make_corpus("public_mix", scale.corpus_seed, scale.n_docs).unwrap();
        let closed: Vec<DomainCorpus> = CLOSED.iter().map(|d| make_corpus(d, scale.corpus_seed, scale.n_docs).unwrap()).collect();
        let (anchor, anchor_log) = pretrain_anchor(scale.model, &public.docs(SplitKind::Train), &embedding_sample(&public), &scale.anchor, scale.init_seed).unwrap();
        let mut branches = Vec::new();
        let mut bundles = Vec::new();
        let mut expert_logs = Vec::new();
        for (id, corpus) in EXPERT_IDS.iter().zip(&closed) {
            let r = init_router_embedding(&anchor, &embedding_sample(corpus)).unwrap();
            let mut branch = init_branch(&anchor, id, r).unwrap();
            let (bundle, log) = train_expert(&mut branch, corpus, &scale.expert).unwrap();
            branches.push(branch);
            bundles.push(bundle);
            expert_logs.push(log);
        }
        let merged = assemble(&anchor, &bundles, None, None).unwrap();
        Self {
            scale,
            public,
            closed,
            anchor,
            anchor_log,
            branches,
            bundles,
            expert_logs,
            merged,
            seconds: t0.elapsed().as_secs_f64(),
        }
    }

    /// `(domain, held-out docs)` for the public domain and every closed one.
    pub fn heldout(&self) -> Vec<(String, Vec<Vec<u8>>)> {
        std::iter::once(&self.public)
            .chain(&self.closed)
            .map(|c| (c.domain_id.clone(), c.docs(SplitKind::Heldout)))
            .collect()
    }
}
