//! Comparison points: parameter soups, output ensembles, upcycled MoEs,
//! query routing, dense continued pretraining and a jointly trained MoE.

pub mod btm;
pub mod btx;
pub mod route;
pub mod soup;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::model::{router_row_name, Transformer, INIT_STD, PUBLIC_EXPERT};
use crate::lmcore::train::{train, TrainConfig, TrainLog};
use crate::merge::MergedModel;
use crate::numcore::tensor::{Role, TensorRecord};

pub use btm::{btm_generate, btm_perplexity, btm_weights, ensemble_generate, ensemble_sequence_nll, prefix_losses, Ensemble, EnsembleWeights};
pub use btx::{btx_assemble, btx_train};
pub use route::{classifier_route_generate, classifier_route_perplexity, DomainRouter};
pub use soup::{soup_average, soup_weighted, soup_weighted_perplexity, soup_weights, soup_with_weights};

/// Continued pretraining of the whole anchor on one closed corpus.
pub fn dense_branch(anchor: &Transformer, docs: &[Vec<u8>], cfg: &TrainConfig) -> Result<(Transformer, TrainLog)> {
    if anchor.roster != [PUBLIC_EXPERT] {
        return Err(Error::Input("dense branching needs a dense anchor".into()));
    }
    let mut m = anchor.clone();
    m.set_trainable(|t| t.role != Role::RouterRow);
    let log = train(&mut m, vec![docs], cfg)?;
    m.freeze_all();
    Ok((m, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMoeConfig {
    /// Experts per layer, the public copy included.
    pub n_experts: usize,
    pub top_k: usize,
    /// Training FLOPs to spend, as counted by the graph.
    pub flops_budget: u64,
    pub train: TrainConfig,
    pub init_seed: u64,
}

/// Sparse upcycling: every expert starts as a copy of the anchor FFN and
/// every router row is drawn from `N(0, 0.02^2)`.
pub fn upcycle(anchor: &Transformer, n_experts: usize, top_k: usize, seed: u64) -> Result<MergedModel> {
    if anchor.roster != [PUBLIC_EXPERT] || n_experts == 0 {
        return Err(Error::Input("upcycling needs a dense anchor and at least one expert".into()));
    }
    let mut m = anchor.clone();
    let h = m.config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut row = |l: usize, id: &str| TensorRecord::new(router_row_name(l, id), vec![h], (0..h).map(|_| dist.sample(&mut rng) as f32).collect(), Role::RouterRow);
    for l in 0..m.blocks.len() {
        m.blocks[l].moe.router[0] = row(l, PUBLIC_EXPERT);
    }
    for e in 1..n_experts {
        let id = format!("x{e}");
        let ffns = anchor.blocks.iter().map(|b| b.moe.experts[0].clone()).collect();
        let rows = (0..m.blocks.len()).map(|l| row(l, &id)).collect();
        m.push_expert(&id, ffns, rows, 0.0)?;
    }
    m.set_top_k(top_k)?;
    Ok(m)
}

/// Jointly trains an upcycled MoE on a uniform mixture of every corpus for
/// as many steps as fit in `cfg.flops_budget` (rounded to the nearest step).
pub fn unrestricted_moe_train(anchor: &Transformer, pools: Vec<&[Vec<u8>]>, cfg: &ReferenceMoeConfig) -> Result<(MergedModel, TrainLog)> {
    let mut model = upcycle(anchor, cfg.n_experts, cfg.top_k, cfg.init_seed)?;
    model.set_trainable(|_| true);
    let probe = train(&mut model.clone(), pools.clone(), &TrainConfig { steps: 1, ..cfg.train })?;
    let steps = (cfg.flops_budget as f64 / probe.flops.max(1) as f64).round() as usize;
    if steps == 0 {
        return Err(Error::Sizing(format!("budget of {} FLOPs is less than half a step ({})", cfg.flops_budget, probe.flops)));
    }
    let log = train(&mut model, pools, &TrainConfig { steps, ..cfg.train })?;
    model.freeze_all();
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpora::make_corpus;
    use crate::lmcore::config::ModelConfig;

    fn anchor() -> Transformer {
        Transformer::init(
            ModelConfig {
                n_layers: 1,
                hidden_dim: 8,
                n_heads: 2,
                ffn_dim: 16,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn reference_moe_spends_its_budget() {
        let a = anchor();
        let x = make_corpus("math_arith", 1, 20).unwrap().documents;
        let y = make_corpus("public_mix", 1, 20).unwrap().documents;
        let mut cfg = ReferenceMoeConfig {
            n_experts: 3,
            top_k: 2,
            flops_budget: 0,
            train: TrainConfig {
                batch_size: 2,
                seq_len: 16,
                warmup_steps: 1,
                ..TrainConfig::default()
            },
            init_seed: 1,
        };
        assert!(matches!(unrestricted_moe_train(&a, vec![&x, &y], &cfg), Err(Error::Sizing(_))));
        let probe = train(&mut upcycle(&a, 3, 2, 1).unwrap(), vec![&x, &y], &TrainConfig { steps: 1, ..cfg.train }).unwrap();
        cfg.flops_budget = probe.flops * 30;
        let (m, log) = unrestricted_moe_train(&a, vec![&x, &y], &cfg).unwrap();
        assert_eq!(m.roster, ["pub", "x1", "x2"]);
        let rel = (log.flops as f64 - cfg.flops_budget as f64).abs() / cfg.flops_budget as f64;
        assert!(rel <= 0.02, "{rel}");
        assert_eq!(unrestricted_moe_train(&a, vec![&x, &y], &cfg).unwrap().0, m);
    }

    #[test]
    fn dense_branch_changes_shared_weights() {
        let a = anchor();
        let x = make_corpus("code_brackets", 1, 20).unwrap().documents;
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 2,
            seq_len: 16,
            warmup_steps: 1,
            base_lr: 1e-2,
            ..TrainConfig::default()
        };
        let (m, log) = dense_branch(&a, &x, &cfg).unwrap();
        assert_eq!(log.losses.len(), 2);
        assert_ne!(m.blocks[0].wq.values, a.blocks[0].wq.values);
        assert_eq!(m.blocks[0].moe.router[0].values, a.blocks[0].moe.router[0].values);
    }
}
