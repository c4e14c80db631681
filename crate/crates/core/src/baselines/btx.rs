//! Upcycling dense models into a mixture of experts: FFNs are copied,
//! everything else is averaged and the routers start random.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::baselines::soup::soup_average;
use crate::error::{Error, Result};
use crate::lmcore::model::{router_row_name, Transformer, INIT_STD, PUBLIC_EXPERT};
use crate::lmcore::train::{train, TrainConfig, TrainLog};
use crate::merge::{default_top_k, MergedModel};
use crate::numcore::tensor::{Role, TensorRecord};

fn random_row(layer: usize, id: &str, h: usize, rng: &mut ChaCha8Rng) -> TensorRecord {
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    TensorRecord::new(router_row_name(layer, id), vec![h], (0..h).map(|_| dist.sample(rng) as f32).collect(), Role::RouterRow)
}

/// Builds `[pub] + experts`: the anchor FFN as `pub`, each dense model's FFN
/// under its id, shared weights averaged over the anchor and all experts,
/// router rows drawn from `N(0, 0.02^2)` and zero biases.
pub fn btx_assemble(anchor: &Transformer, experts: &[(String, Transformer)], top_k: Option<usize>, seed: u64) -> Result<MergedModel> {
    let mut all: Vec<&Transformer> = vec![anchor];
    all.extend(experts.iter().map(|(_, m)| m));
    if all.iter().any(|m| m.roster != [PUBLIC_EXPERT]) {
        return Err(Error::Merge("upcycling needs dense models".into()));
    }
    let mut model = soup_average(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = model.config.hidden_dim;
    for (l, block) in model.blocks.iter_mut().enumerate() {
        block.moe.experts[0] = anchor.blocks[l].moe.experts[0].clone();
        block.moe.router[0] = random_row(l, PUBLIC_EXPERT, h, &mut rng);
    }
    for (id, dense) in experts {
        let ffns = dense.blocks.iter().map(|b| b.moe.experts[0].clone()).collect();
        let rows = (0..model.blocks.len()).map(|l| random_row(l, id, h, &mut rng)).collect();
        model.push_expert(id, ffns, rows, 0.0)?;
    }
    model.set_top_k(top_k.unwrap_or_else(|| default_top_k(experts.len())))?;
    model.freeze_all();
    model.check()?;
    Ok(model)
}

/// Trains every parameter of an upcycled model on public data only.
pub fn btx_train(model: &MergedModel, public_docs: &[Vec<u8>], cfg: &TrainConfig) -> Result<(MergedModel, TrainLog)> {
    let mut out = model.clone();
    out.set_trainable(|_| true);
    let log = train(&mut out, vec![public_docs], cfg)?;
    out.freeze_all();
    Ok((out, log))
}
