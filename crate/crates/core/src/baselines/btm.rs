//! Output ensembling: token-level mixing of several models' logits with
//! weights taken from their likelihood of the prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalx::{mean_nll, token_windows};
use crate::lmcore::decode::{Decoder, LogitSource};
use crate::lmcore::forward::logits;
use crate::lmcore::tokenizer::encode;
use crate::numcore::graph::log_softmax_at;
use crate::lmcore::generate::{generate_from, SamplingParams};
use crate::lmcore::model::Transformer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub k: usize,
    pub losses: Vec<f64>,
}

/// `exp(-L_i / tau)` normalized, then restricted to the `k` largest (ties
/// to the lower index) and renormalized. Non-finite losses weigh zero.
pub fn btm_weights(losses: &[f64], temperature: f64, k: usize) -> Result<EnsembleWeights> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if k == 0 || k > losses.len() {
        return Err(Error::Config(format!("k = {k} out of range 1..={}", losses.len())));
    }
    let best = losses.iter().copied().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Input("every ensemble loss is non-finite".into()));
    }
    let raw: Vec<f64> = losses
        .iter()
        .map(|&l| if l.is_finite() { ((best - l) / temperature).exp() } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; raw.len()];
    for &i in &order[..k] {
        weights[i] = raw[i];
    }
    let z: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= z;
    }
    Ok(EnsembleWeights {
        weights,
        temperature,
        k,
        losses: losses.to_vec(),
    })
}

/// Weighted sum of member logits; members with zero weight are skipped.
pub struct Ensemble<'m> {
    members: Vec<(f32, Decoder<'m>)>,
}

impl<'m> Ensemble<'m> {
    pub fn new(models: &[&'m Transformer], weights: &[f64]) -> Result<Self> {
        if models.is_empty() || models.len() != weights.len() {
            return Err(Error::Input(format!("{} models with {} weights", models.len(), weights.len())));
        }
        let vocab = models[0].config.vocab_size;
        if models.iter().any(|m| m.config.vocab_size != vocab) {
            return Err(Error::Input("ensemble members must share a vocabulary".into()));
        }
        let members: Vec<(f32, Decoder<'m>)> = models
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(m, &w)| (w as f32, Decoder::new(m)))
            .collect();
        if members.is_empty() {
            return Err(Error::Input("every ensemble weight is zero".into()));
        }
        Ok(Self { members })
    }
}

impl LogitSource for Ensemble<'_> {
    fn max_context(&self) -> usize {
        self.members.iter().map(|(_, d)| d.max_context()).min().unwrap_or(0)
    }

    fn len(&self) -> usize {
        self.members[0].1.len()
    }

    fn reset(&mut self) {
        for (_, d) in &mut self.members {
            d.reset();
        }
    }

    fn push(&mut self, token: u32) -> Result<Vec<f32>> {
        let mut out: Vec<f32> = Vec::new();
        for (w, d) in &mut self.members {
            let z = d.push(token)?;
            if out.is_empty() {
                out = vec![0.0; z.len()];
            }
            for (o, v) in out.iter_mut().zip(z) {
                *o += *w * v;
            }
        }
        Ok(out)
    }
}

/// Mean NLL of the prompt under each model; zeros when the prompt has no
/// prediction target.
pub fn prefix_losses(models: &[&Transformer], prefix: &[u32]) -> Result<Vec<f64>> {
    if prefix.len() < 2 {
        return Ok(vec![0.0; models.len()]);
    }
    models.iter().map(|m| mean_nll(m, prefix)).collect()
}

/// Generates with weights computed once from the prompt and then held fixed.
pub fn btm_generate(models: &[&Transformer], prefix: &[u32], temperature: f64, k: usize, params: &SamplingParams) -> Result<(Vec<u32>, EnsembleWeights)> {
    let w = btm_weights(&prefix_losses(models, prefix)?, temperature, k)?;
    let out = ensemble_generate(models, &w.weights, prefix, params)?;
    Ok((out, w))
}

pub fn ensemble_generate(models: &[&Transformer], weights: &[f64], prefix: &[u32], params: &SamplingParams) -> Result<Vec<u32>> {
    let mut e = Ensemble::new(models, weights)?;
    generate_from(&mut e, prefix, params)
}

/// NLL of `tokens` under the weighted logit mixture.
pub fn ensemble_sequence_nll(models: &[&Transformer], weights: &[f64], tokens: &[u32]) -> Result<(f64, usize)> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Input(format!("{} models with {} weights", models.len(), weights.len())));
    }
    let v = models[0].config.vocab_size;
    let ctx = models.iter().map(|m| m.config.max_seq_len).min().unwrap_or(0);
    let mut total = 0.0;
    let mut count = 0;
    for w in token_windows(tokens, ctx) {
        let n = w.len() - 1;
        let mut mix = vec![0.0f32; n * v];
        for (m, &wt) in models.iter().zip(weights) {
            if wt <= 0.0 {
                continue;
            }
            for (o, z) in mix.iter_mut().zip(logits(m, &w[..n], 1, n)?) {
                *o += wt as f32 * z;
            }
        }
        for (i, &t) in w[1..].iter().enumerate() {
            total -= log_softmax_at(&mix[i * v..(i + 1) * v], t as usize) as f64;
            count += 1;
        }
    }
    Ok((total, count))
}

/// Ensemble perplexity where each document's weights come from its first
/// `prefix_len` tokens.
pub fn btm_perplexity(models: &[&Transformer], docs: &[Vec<u8>], temperature: f64, k: usize, prefix_len: usize) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for d in docs {
        let tokens = encode(d);
        let w = btm_weights(&prefix_losses(models, &tokens[..prefix_len.min(tokens.len())])?, temperature, k)?;
        let (t, c) = ensemble_sequence_nll(models, &w.weights, &tokens)?;
        total += t;
        count += c;
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmcore::config::ModelConfig;
    use crate::lmcore::generate::generate;
    use proptest::prelude::*;

    fn model(seed: u64) -> Transformer {
        Transformer::init(
            ModelConfig {
                n_layers: 1,
                hidden_dim: 8,
                n_heads: 2,
                ffn_dim: 16,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn weight_examples() {
        let u = btm_weights(&[1.0, 1.0, 1.0], 1.0, 3).unwrap();
        assert!(u.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(btm_weights(&[2.0, 1.0, 3.0], 1e-6, 3).unwrap().weights, vec![0.0, 1.0, 0.0]);
        let t = btm_weights(&[1.0, 2.0, 3.0], 1.0, 2).unwrap();
        assert!((t.weights[0] - 0.7311).abs() < 1e-4 && (t.weights[1] - 0.2689).abs() < 1e-4 && t.weights[2] == 0.0);
        assert!(btm_weights(&[1.0], 0.0, 1).is_err());
        assert!(btm_weights(&[1.0], 1.0, 2).is_err());
        assert!(matches!(btm_weights(&[f64::INFINITY], 1.0, 1), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn weights_are_normalized_and_monotone(losses in proptest::collection::vec(0.0f64..10.0, 1..6), tau in 0.1f64..5.0, k in 1usize..6) {
            let k = k.min(losses.len());
            let w = btm_weights(&losses, tau, k).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().filter(|&&x| x > 0.0).count() <= k);
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] < losses[j] {
                        prop_assert!(w.weights[i] >= w.weights[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_ensembles_match_single_models() {
        let (a, b) = (model(1), model(2));
        let prefix = [256, 10, 20, 30];
        let p = SamplingParams {
            max_new_tokens: 20,
            seed: 4,
            ..SamplingParams::default()
        };
        let solo = generate(&a, &prefix, &p).unwrap();
        assert_eq!(btm_generate(&[&a], &prefix, 0.7, 1, &p).unwrap().0, solo);
        assert_eq!(btm_generate(&[&a, &a], &prefix, 1.0, 2, &p).unwrap().0, solo);
        let g = SamplingParams::greedy(20);
        assert_eq!(ensemble_generate(&[&a, &b], &[1.0, 0.0], &prefix, &g).unwrap(), generate(&a, &prefix, &g).unwrap());
    }

    #[test]
    fn one_member_ensemble_scores_like_the_model() {
        let a = model(1);
        let tokens: Vec<u32> = (0..40).map(|i| (i * 13 % 256) as u32).collect();
        assert_eq!(ensemble_sequence_nll(&[&a], &[1.0], &tokens).unwrap(), crate::evalx::sequence_nll(&a, &tokens).unwrap());
    }
}
