//! Expert selection and the single-vector mixture-of-experts forward.
//!
//! Selection uses the biased scores `r_i·x + b_i`; the gate weights use the
//! unbiased logits of the selected set (unless `bias_in_gate` is configured).

use crate::error::{Error, Result};
use crate::lmcore::config::{GateNormalization, RoutingConfig};
use crate::lmcore::model::{Ffn, MoeLayer};
use crate::numcore::graph::{gelu, masked_softmax, softmax_in_place};
use crate::numcore::scalar::{gemm, MatRef};

/// Indices of the `top_k` largest biased scores, returned in ascending index
/// order. Equal scores prefer the lower index. Experts whose biased score is
/// not finite (the `-inf` sentinel) are never selected.
pub fn select_experts(router_logits: &[f32], biases: &[f32], top_k: usize) -> Vec<usize> {
    assert_eq!(router_logits.len(), biases.len(), "logit/bias length mismatch");
    let mut order: Vec<(usize, f32)> = router_logits
        .iter()
        .zip(biases)
        .enumerate()
        .map(|(i, (&l, &b))| (i, l + b))
        .filter(|(_, s)| s.is_finite())
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = order.into_iter().take(top_k).map(|(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

/// Selection mask (row-major `n_tokens x n_experts`) for a batch of logits.
pub fn select_mask(logits: &[f32], n_experts: usize, biases: &[f32], top_k: usize) -> Vec<bool> {
    let mut mask = vec![false; logits.len()];
    for (row, m) in logits.chunks(n_experts).zip(mask.chunks_mut(n_experts)) {
        for i in select_experts(row, biases, top_k) {
            m[i] = true;
        }
    }
    mask
}

/// Gate weights for one token given its selection mask.
pub fn gate_weights(logits: &[f32], biases: &[f32], selected: &[bool], routing: RoutingConfig) -> Vec<f32> {
    let gate_logits: Vec<f32> = if routing.bias_in_gate {
        logits.iter().zip(biases).map(|(l, b)| l + b).collect()
    } else {
        logits.to_vec()
    };
    let mut out = vec![0.0; logits.len()];
    match routing.gate {
        GateNormalization::SelectedSoftmax => masked_softmax(&gate_logits, selected, &mut out),
        GateNormalization::FullSoftmax => {
            out.copy_from_slice(&gate_logits);
            softmax_in_place(&mut out);
            for (o, &s) in out.iter_mut().zip(selected) {
                if !s {
                    *o = 0.0;
                }
            }
        }
    }
    out
}

/// `x·W + b` for a row vector, with `W` stored `in x out`.
pub fn affine(x: &[f32], w: &[f32], b: &[f32], out_dim: usize) -> Vec<f32> {
    let mut out = b.to_vec();
    gemm(
        MatRef::new(x, 1, x.len()),
        MatRef::new(w, x.len(), out_dim),
        1.0,
        1.0,
        &mut out,
        0,
        out_dim,
    );
    out
}

/// Two-layer GELU feed-forward on a single hidden vector.
pub fn ffn_forward(ffn: &Ffn, x: &[f32]) -> Vec<f32> {
    let f = ffn.b_in.len();
    let mut hidden = affine(x, &ffn.w_in.values, &ffn.b_in.values, f);
    for v in hidden.iter_mut() {
        *v = gelu(*v);
    }
    affine(&hidden, &ffn.w_out.values, &ffn.b_out.values, x.len())
}

/// Routing decision for one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub selected: Vec<usize>,
    /// Gate weights aligned with `selected`.
    pub gates: Vec<f32>,
}

/// `y = Σ_{i ∈ TopK(W_r·x + b)} gate_i · M_i(x)` for one hidden vector.
pub fn moe_forward(x: &[f32], layer: &MoeLayer, top_k: usize, routing: RoutingConfig) -> Result<(Vec<f32>, Routing)> {
    let n = layer.n_experts();
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!("top_k {top_k} out of range for {n} experts")));
    }
    let h = x.len();
    let logits: Vec<f32> = layer
        .router
        .iter()
        .map(|r| {
            assert_eq!(r.len(), h, "router row width mismatch");
            r.values.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect();
    let selected = select_experts(&logits, &layer.biases, top_k);
    let mut mask = vec![false; n];
    for &i in &selected {
        mask[i] = true;
    }
    let all_gates = gate_weights(&logits, &layer.biases, &mask, routing);
    let mut y = vec![0.0f32; h];
    for &i in &selected {
        let out = ffn_forward(&layer.experts[i], x);
        let g = all_gates[i];
        for (acc, o) in y.iter_mut().zip(out) {
            *acc += g * o;
        }
    }
    let gates = selected.iter().map(|&i| all_gates[i]).collect();
    Ok((y, Routing { selected, gates }))
}
