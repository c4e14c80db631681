//! Held-out perplexity, routing analytics, active-expert sweeps and the
//! extraction attack.

pub mod extraction;
pub mod levenshtein;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::forward::{logits, logits_and_traces};
use crate::lmcore::model::Transformer;
use crate::lmcore::tokenizer::encode;
use crate::numcore::graph::log_softmax_at;

pub use extraction::{extraction_attack, trial_seed, ExtractionParams, ExtractionResult};
pub use levenshtein::{edit_distance, normalized_levenshtein};
pub use report::{EvalReport, OptOutDelta, REPORT_SCHEMA_VERSION};

/// Windows of at most `ctx + 1` tokens, consecutive windows sharing one
/// token, so every token after the first is predicted exactly once.
pub fn token_windows(tokens: &[u32], ctx: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + ctx + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start = end - 1;
    }
    out
}

/// Summed negative log-likelihood and target count over a token sequence.
pub fn sequence_nll(model: &Transformer, tokens: &[u32]) -> Result<(f64, usize)> {
    let v = model.config.vocab_size;
    let mut total = 0.0f64;
    let mut count = 0;
    for w in token_windows(tokens, model.config.max_seq_len) {
        let n = w.len() - 1;
        let z = logits(model, &w[..n], 1, n)?;
        for (i, &t) in w[1..].iter().enumerate() {
            total -= log_softmax_at(&z[i * v..(i + 1) * v], t as usize) as f64;
            count += 1;
        }
    }
    Ok((total, count))
}

/// Mean per-token NLL of a token sequence; needs at least two tokens.
pub fn mean_nll(model: &Transformer, tokens: &[u32]) -> Result<f64> {
    let (total, count) = sequence_nll(model, tokens)?;
    if count == 0 {
        return Err(Error::Input("need at least two tokens to score".into()));
    }
    Ok(total / count as f64)
}

/// Corpus-level NLL: each document is encoded with BOS and EOS, BOS is
/// never a target.
pub fn corpus_nll(model: &Transformer, docs: &[Vec<u8>]) -> Result<(f64, usize)> {
    if docs.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for d in docs {
        let (t, c) = sequence_nll(model, &encode(d))?;
        total += t;
        count += c;
    }
    Ok((total, count))
}

/// `exp` of the mean token cross-entropy over `docs`.
pub fn perplexity(model: &Transformer, docs: &[Vec<u8>]) -> Result<f64> {
    let (total, count) = corpus_nll(model, docs)?;
    Ok((total / count as f64).exp())
}

/// Perplexity on each named document set.
pub fn perplexities(model: &Transformer, domains: &[(String, Vec<Vec<u8>>)]) -> Result<BTreeMap<String, f64>> {
    domains.iter().map(|(id, docs)| Ok((id.clone(), perplexity(model, docs)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRouting {
    pub n_tokens: usize,
    /// `[layer][expert]` selection counts.
    pub counts: Vec<Vec<u64>>,
    /// Counts normalized to sum to one per layer.
    pub fractions: Vec<Vec<f64>>,
}

impl DomainRouting {
    /// Non-public expert with the most selections at `layer`, ties to the
    /// lower index; `None` if no non-public expert was selected.
    pub fn top_non_public(&self, layer: usize) -> Option<usize> {
        let c = &self.counts[layer];
        let mut best = None;
        for (e, &n) in c.iter().enumerate().skip(1) {
            if n > 0 && best.is_none_or(|b: usize| n > c[b]) {
                best = Some(e);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingProfile {
    pub roster: Vec<String>,
    pub top_k: usize,
    pub domains: BTreeMap<String, DomainRouting>,
}

/// Up to `n_tokens` tokens of each document set, taken in order, are routed
/// and each layer's selections counted per expert.
pub fn routing_profile(model: &Transformer, domains: &[(String, Vec<Vec<u8>>)], n_tokens: usize) -> Result<RoutingProfile> {
    let ctx = model.config.max_seq_len;
    let (l, e) = (model.blocks.len(), model.n_experts());
    let mut out = BTreeMap::new();
    for (id, docs) in domains {
        let mut counts = vec![vec![0u64; e]; l];
        let mut seen = 0;
        'docs: for d in docs {
            let tokens = encode(d);
            for chunk in tokens.chunks(ctx) {
                let take = chunk.len().min(n_tokens - seen);
                if take == 0 {
                    break 'docs;
                }
                let (_, traces) = logits_and_traces(model, &chunk[..take], 1, take)?;
                for (layer, tr) in traces.iter().enumerate() {
                    for (x, c) in counts[layer].iter_mut().enumerate() {
                        *c += tr.count(x) as u64;
                    }
                }
                seen += take;
            }
        }
        let fractions = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect();
        out.insert(id.clone(), DomainRouting { n_tokens: seen, counts, fractions });
    }
    Ok(RoutingProfile {
        roster: model.roster.clone(),
        top_k: model.config.top_k,
        domains: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub perplexity: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Perplexity per domain with `top_k` set to each of `ks`.
pub fn active_expert_sweep(model: &Transformer, domains: &[(String, Vec<Vec<u8>>)], ks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut m = model.clone();
        m.set_top_k(k)?;
        let perplexity = perplexities(&m, domains)?;
        let mean = perplexity.values().sum::<f64>() / perplexity.len().max(1) as f64;
        rows.push(SweepRow { k, perplexity, mean });
    }
    Ok(rows)
}

/// Perplexity per domain before and after removing `expert_id`.
pub fn opt_out_delta(model: &Transformer, expert_id: &str, domains: &[(String, Vec<Vec<u8>>)]) -> Result<OptOutDelta> {
    let before = perplexities(model, domains)?;
    let after = perplexities(&crate::merge::opt_out(model, expert_id)?, domains)?;
    let relative_change = before.iter().map(|(d, b)| (d.clone(), after[d] / b - 1.0)).collect();
    Ok(OptOutDelta {
        expert_id: expert_id.to_string(),
        before,
        after,
        relative_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpora::make_corpus;
    use crate::lmcore::config::ModelConfig;

    fn model(max_seq_len: usize) -> Transformer {
        Transformer::init(
            ModelConfig {
                n_layers: 2,
                hidden_dim: 16,
                n_heads: 2,
                ffn_dim: 32,
                max_seq_len,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn windows_predict_each_token_once() {
        let t: Vec<u32> = (0..10).collect();
        let w = token_windows(&t, 4);
        assert_eq!(w, vec![&t[0..5], &t[4..9], &t[8..10]]);
        assert!(token_windows(&t[..1], 4).is_empty());
        let targets: usize = w.iter().map(|w| w.len() - 1).sum();
        assert_eq!(targets, 9);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let m = model(32);
        let docs = make_corpus("news_templates", 1, 20).unwrap().documents;
        let p = perplexity(&m, &docs[..4]).unwrap();
        let v = m.config.vocab_size as f64;
        assert!((p - v).abs() <= 0.1 * v, "{p}");
        assert_eq!(p, perplexity(&m, &docs[..4]).unwrap());
        assert!(matches!(perplexity(&m, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn long_documents_are_windowed() {
        let m = model(16);
        let doc = vec![b'x'; 40];
        let (total, count) = corpus_nll(&m, std::slice::from_ref(&doc)).unwrap();
        assert_eq!(count, 41);
        assert!(total.is_finite());
    }

    #[test]
    fn dense_profile_is_all_public() {
        let m = model(32);
        let docs = make_corpus("math_arith", 1, 20).unwrap().documents;
        let p = routing_profile(&m, &[("math".into(), docs)], 100).unwrap();
        let d = &p.domains["math"];
        assert_eq!(d.n_tokens, 100);
        for layer in &d.fractions {
            assert_eq!(layer, &vec![1.0]);
        }
        assert_eq!(d.top_non_public(0), None);
    }

    #[test]
    fn sweep_has_one_row_per_k() {
        let m = model(32);
        let docs = make_corpus("math_arith", 1, 20).unwrap().documents;
        let rows = active_expert_sweep(&m, &[("math".into(), docs[..2].to_vec())], &[1]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(active_expert_sweep(&m, &[("math".into(), docs[..2].to_vec())], &[2]).is_err());
    }
}
