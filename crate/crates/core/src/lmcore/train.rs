//! Next-token training loop shared by pretraining, branching and router tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::forward::{forward, write_grads};
use crate::lmcore::model::Transformer;
use crate::lmcore::tokenizer::{encode, PAD};
use crate::numcore::graph::{Graph, Var};
use crate::numcore::optim::{AdamWConfig, CosineSchedule, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Weight of the auxiliary load-balancing loss; 0 disables it.
    pub load_balance_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 256,
            base_lr: 9e-4,
            warmup_steps: 100,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            load_balance_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(
            AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            CosineSchedule {
                base_lr: self.base_lr,
                warmup_steps: self.warmup_steps.min(self.steps.saturating_sub(1)) as u64,
                total_steps: self.steps.max(1) as u64,
                final_lr_fraction: self.final_lr_fraction,
            },
        )
    }
}

/// A batch of `batch x seq` input tokens with masked next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq: usize,
}

/// Splits an encoded document into a `seq`-token input window and its
/// targets, padding short windows. Padding positions carry no target.
pub fn window(encoded: &[u32], start: usize, seq: usize) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut w: Vec<u32> = encoded.iter().skip(start).take(seq + 1).copied().collect();
    w.resize(seq + 1, PAD);
    let tokens = w[..seq].to_vec();
    let targets = w[1..].iter().map(|&t| (t != PAD).then_some(t as usize)).collect();
    (tokens, targets)
}

/// Draws training batches uniformly over pools, then uniformly over the
/// documents of the chosen pool, each cropped to a random window.
pub struct BatchSampler<'a> {
    pools: Vec<&'a [Vec<u8>]>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pools: Vec<&'a [Vec<u8>]>, seed: u64) -> Result<Self> {
        if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
            return Err(Error::Input("training needs at least one non-empty document pool".into()));
        }
        Ok(Self {
            pools,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, batch: usize, seq: usize) -> Batch {
        let mut tokens = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let pool = self.pools[self.rng.random_range(0..self.pools.len())];
            let doc = &pool[self.rng.random_range(0..pool.len())];
            let enc = encode(doc);
            let span = enc.len().saturating_sub(seq + 1);
            let start = if span == 0 { 0 } else { self.rng.random_range(0..=span) };
            let (t, y) = window(&enc, start, seq);
            tokens.extend(t);
            targets.extend(y);
        }
        Batch { tokens, targets, batch, seq }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    /// Multiply-add FLOPs of forward plus backward, summed over all steps.
    pub flops: u64,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f32> {
        self.losses.last().copied()
    }
}

fn load_balance_term(g: &mut Graph<f32>, logits: Var, selected: &[bool], n_experts: usize) -> Var {
    let (n, _) = g.shape(logits);
    let probs = g.softmax(logits);
    let ones = g.constant(vec![1.0 / n as f32; n], 1, n);
    let mean_p = g.matmul(ones, probs);
    let mut frac = vec![0.0f32; n_experts];
    for row in selected.chunks(n_experts) {
        for (f, &s) in frac.iter_mut().zip(row) {
            if s {
                *f += 1.0;
            }
        }
    }
    let total: f32 = frac.iter().sum::<f32>().max(1.0);
    let frac = g.constant(frac.iter().map(|f| f * n_experts as f32 / total).collect(), n_experts, 1);
    g.matmul(mean_p, frac)
}

fn bias_snapshot(model: &Transformer) -> Vec<Vec<u32>> {
    model
        .blocks
        .iter()
        .map(|b| b.moe.biases.iter().map(|x| x.to_bits()).collect())
        .collect()
}

/// One optimizer step on `batch`; returns the loss.
pub fn train_step(model: &mut Transformer, opt: &mut OptimizerState, batch: &Batch, load_balance_weight: f64, flops: &mut u64) -> Result<f32> {
    let mut g = Graph::new();
    let fwd = forward(&mut g, model, &batch.tokens, batch.batch, batch.seq)?;
    let mut loss = g.cross_entropy(fwd.logits, &batch.targets);
    g.set_label(loss, "cross_entropy");
    if load_balance_weight > 0.0 {
        for (logits, trace) in fwd.router_logits.iter().zip(&fwd.traces) {
            if let Some(l) = *logits {
                let term = load_balance_term(&mut g, l, &trace.selected, trace.n_experts);
                let term = g.scale(term, load_balance_weight as f32);
                loss = g.add(loss, term);
            }
        }
    }
    let value = g.value(loss)[0];
    let forward_flops = g.flops();
    let grads = g.backward(loss)?;
    *flops += forward_flops * 3;
    write_grads(model, &fwd, &grads);
    opt.step(model.tensors_mut())?;
    Ok(value)
}

/// Trains the currently trainable tensors of `model` on `pools`. Every frozen
/// tensor and every bias is verified bit-identical afterwards.
pub fn train(model: &mut Transformer, pools: Vec<&[Vec<u8>]>, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, pools, cfg, |_, _| {})
}

/// [`train`] with a per-step callback receiving `(step, loss)`.
pub fn train_with(
    model: &mut Transformer,
    pools: Vec<&[Vec<u8>]>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<TrainLog> {
    if cfg.batch_size == 0 || cfg.seq_len == 0 {
        return Err(Error::Config("batch size and sequence length must be positive".into()));
    }
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "training sequence length {} exceeds model context {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    let mut sampler = BatchSampler::new(pools, cfg.seed)?;
    let before = model.frozen_hashes();
    let biases = bias_snapshot(model);
    let mut opt = cfg.optimizer();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size, cfg.seq_len);
        let loss = train_step(model, &mut opt, &batch, cfg.load_balance_weight, &mut log.flops)?;
        log.losses.push(loss);
        on_step(step, loss);
    }
    for t in model.tensors_mut() {
        t.grad = None;
    }
    verify_frozen(model, &before)?;
    if bias_snapshot(model) != biases {
        return Err(Error::invariant("frozen-tensor-drift", "selection biases changed during training"));
    }
    Ok(log)
}

/// Checks that every tensor in `before` still hashes to the recorded value.
pub fn verify_frozen(model: &Transformer, before: &std::collections::BTreeMap<String, String>) -> Result<()> {
    for (name, hash) in before {
        match model.tensor(name) {
            Some(t) if &t.content_hash() == hash => {}
            Some(_) => return Err(Error::invariant("frozen-tensor-drift", format!("{name} changed"))),
            None => return Err(Error::invariant("frozen-tensor-drift", format!("{name} disappeared"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmcore::config::ModelConfig;
    use crate::lmcore::tokenizer::{BOS, EOS};

    fn tiny() -> Transformer {
        Transformer::init(
            ModelConfig {
                n_layers: 1,
                hidden_dim: 16,
                n_heads: 2,
                ffn_dim: 32,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 16,
            base_lr: 1e-2,
            warmup_steps: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn windows_pad_and_mask() {
        let enc = encode(b"ab");
        let (t, y) = window(&enc, 0, 5);
        assert_eq!(t, vec![BOS, 97, 98, EOS, PAD]);
        assert_eq!(y, vec![Some(97), Some(98), Some(EOS as usize), None, None]);
    }

    #[test]
    fn loss_decreases_on_a_repeated_document() {
        let mut m = tiny();
        m.set_trainable(|_| true);
        let docs = vec![b"abcabcabcabc".to_vec()];
        let log = train(&mut m, vec![&docs], &cfg(40)).unwrap();
        assert!(log.losses[39] < log.losses[0] * 0.5, "{:?}", log.losses);
        assert!(log.flops > 0);
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let docs = vec![b"hello world".to_vec(), b"12 + 3 = 15".to_vec()];
        let mut a = tiny();
        a.set_trainable(|t| t.name.contains("experts"));
        let mut b = a.clone();
        train(&mut a, vec![&docs], &cfg(5)).unwrap();
        train(&mut b, vec![&docs], &cfg(5)).unwrap();
        assert_eq!(a, b);
        let base = tiny();
        for (x, y) in a.tensors().into_iter().zip(base.tensors()) {
            assert_eq!(x.bits_eq(y), !x.name.contains("experts"), "{}", x.name);
        }
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let docs = vec![b"x".to_vec()];
        let mut m = tiny();
        let before = m.clone();
        train(&mut m, vec![&docs], &cfg(0)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let docs: Vec<Vec<u8>> = vec![];
        assert!(matches!(train(&mut tiny(), vec![&docs], &cfg(1)), Err(Error::Input(_))));
    }
}
