//! Batched forward pass of the transformer on a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lmcore::config::GateNormalization;
use crate::lmcore::model::{Ffn, Transformer};
use crate::lmcore::moe::select_mask;
use crate::numcore::graph::{Gradients, Graph, Var};
use crate::numcore::tensor::TensorRecord;

/// Per-layer routing decisions for every token of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub n_tokens: usize,
    pub n_experts: usize,
    /// Row-major `n_tokens x n_experts` selection mask.
    pub selected: Vec<bool>,
    /// Row-major gate weights; zero where unselected.
    pub gates: Vec<f32>,
}

impl RoutingTrace {
    pub fn count(&self, expert: usize) -> usize {
        self.selected.iter().skip(expert).step_by(self.n_experts).filter(|&&s| s).count()
    }

    pub fn selected_for(&self, token: usize) -> Vec<usize> {
        (0..self.n_experts)
            .filter(|&e| self.selected[token * self.n_experts + e])
            .collect()
    }
}

/// Outputs of [`forward`]: handles into the graph plus routing traces.
pub struct Forward {
    pub logits: Var,
    /// Input of each layer's expert block (after the second layer norm).
    pub moe_inputs: Vec<Var>,
    pub final_hidden: Var,
    /// Router logits `(tokens x experts)` per layer; `None` for dense layers.
    pub router_logits: Vec<Option<Var>>,
    pub traces: Vec<RoutingTrace>,
    bindings: HashMap<String, Var>,
}

impl Forward {
    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }
}

struct Binder<'g> {
    g: &'g mut Graph<f32>,
    map: HashMap<String, Var>,
}

impl Binder<'_> {
    fn bind(&mut self, t: &TensorRecord) -> Var {
        if let Some(v) = self.map.get(&t.name) {
            return *v;
        }
        let v = self.g.bind(t);
        self.map.insert(t.name.clone(), v);
        v
    }
}

fn ffn_graph(b: &mut Binder<'_>, ffn: &Ffn, x: Var) -> Var {
    let w_in = b.bind(&ffn.w_in);
    let b_in = b.bind(&ffn.b_in);
    let w_out = b.bind(&ffn.w_out);
    let b_out = b.bind(&ffn.b_out);
    let h = b.g.matmul(x, w_in);
    let h = b.g.add_row(h, b_in);
    let h = b.g.gelu(h);
    let o = b.g.matmul(h, w_out);
    b.g.add_row(o, b_out)
}

/// Validates token ids and the `batch x seq` layout.
pub fn check_tokens(model: &Transformer, tokens: &[u32], batch: usize, seq: usize) -> Result<()> {
    if tokens.len() != batch * seq {
        return Err(Error::Input(format!("{} tokens do not form a {batch}x{seq} batch", tokens.len())));
    }
    if seq == 0 || seq > model.config.max_seq_len {
        return Err(Error::Input(format!("sequence length {seq} outside 1..={}", model.config.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return Err(Error::Input(format!("token id {bad} >= vocab size {}", model.config.vocab_size)));
    }
    Ok(())
}

/// Builds the forward pass for `batch` sequences of length `seq` (row-major
/// token ids) and returns next-token logits of shape `(batch*seq) x vocab`.
pub fn forward(g: &mut Graph<f32>, model: &Transformer, tokens: &[u32], batch: usize, seq: usize) -> Result<Forward> {
    check_tokens(model, tokens, batch, seq)?;
    let cfg = &model.config;
    let n = batch * seq;
    let mut b = Binder { g, map: HashMap::new() };

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let tok = b.bind(&model.tok_emb);
    let pos = b.bind(&model.pos_emb);
    let te = b.g.embedding(tok, &ids);
    let pe = b.g.embedding(pos, &positions);
    let mut x = b.g.add(te, pe);

    let mut moe_inputs = Vec::with_capacity(model.blocks.len());
    let mut traces = Vec::with_capacity(model.blocks.len());
    let mut router_logits = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let g1 = b.bind(&block.ln1_gamma);
        let b1 = b.bind(&block.ln1_beta);
        let a = b.g.layer_norm(x, g1, b1);
        let wq = b.bind(&block.wq);
        let wk = b.bind(&block.wk);
        let wv = b.bind(&block.wv);
        let wo = b.bind(&block.wo);
        let q = b.g.matmul(a, wq);
        let k = b.g.matmul(a, wk);
        let v = b.g.matmul(a, wv);
        let att = b.g.attention(q, k, v, batch, seq, cfg.n_heads);
        let o = b.g.matmul(att, wo);
        x = b.g.add(x, o);

        let g2 = b.bind(&block.ln2_gamma);
        let b2 = b.bind(&block.ln2_beta);
        let a2 = b.g.layer_norm(x, g2, b2);
        moe_inputs.push(a2);

        let moe = &block.moe;
        let e = moe.n_experts();
        let (y, trace) = if e == 1 {
            let y = ffn_graph(&mut b, &moe.experts[0], a2);
            let trace = RoutingTrace {
                n_tokens: n,
                n_experts: 1,
                selected: vec![true; n],
                gates: vec![1.0; n],
            };
            router_logits.push(None);
            (y, trace)
        } else {
            let rows: Vec<Var> = moe.router.iter().map(|r| b.bind(r)).collect();
            let w_r = b.g.concat_rows(&rows);
            let logits = b.g.matmul_t(a2, false, w_r, true);
            router_logits.push(Some(logits));
            let mask = select_mask(b.g.value(logits), e, &moe.biases, cfg.top_k);
            let gate_in = if cfg.routing.bias_in_gate {
                let bias = b.g.constant(moe.biases.clone(), 1, e);
                b.g.add_row(logits, bias)
            } else {
                logits
            };
            let gates = match cfg.routing.gate {
                GateNormalization::SelectedSoftmax => b.g.topk_softmax(gate_in, &mask),
                GateNormalization::FullSoftmax => {
                    let p = b.g.softmax(gate_in);
                    let m = b.g.constant(mask.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(), n, e);
                    b.g.mul(p, m)
                }
            };
            let mut y: Option<Var> = None;
            for (ei, ffn) in moe.experts.iter().enumerate() {
                let idx: Vec<usize> = (0..n).filter(|&r| mask[r * e + ei]).collect();
                if idx.is_empty() {
                    continue;
                }
                let full = idx.len() == n;
                let xe = if full { a2 } else { b.g.gather_rows(a2, &idx) };
                let ye = ffn_graph(&mut b, ffn, xe);
                let col = b.g.take_col(gates, ei);
                let ge = if full { col } else { b.g.gather_rows(col, &idx) };
                let mut we = b.g.mul_col(ye, ge);
                if !full {
                    we = b.g.scatter_rows(we, &idx, n);
                }
                y = Some(match y {
                    None => we,
                    Some(acc) => b.g.add(acc, we),
                });
            }
            let trace = RoutingTrace {
                n_tokens: n,
                n_experts: e,
                selected: mask,
                gates: b.g.value(gates).to_vec(),
            };
            (y.expect("every token selects at least one expert"), trace)
        };
        traces.push(trace);
        x = b.g.add(x, y);
    }
    let gf = b.bind(&model.lnf_gamma);
    let bf = b.bind(&model.lnf_beta);
    let final_hidden = b.g.layer_norm(x, gf, bf);
    let head = b.bind(&model.head);
    let logits = b.g.matmul(final_hidden, head);
    Ok(Forward {
        logits,
        moe_inputs,
        final_hidden,
        router_logits,
        traces,
        bindings: b.map,
    })
}

/// Copies gradients into every trainable tensor. Trainable tensors the loss
/// did not reach get an explicit zero gradient.
pub fn write_grads(model: &mut Transformer, fwd: &Forward, grads: &Gradients<f32>) {
    for t in model.tensors_mut() {
        if !t.trainable {
            t.grad = None;
            continue;
        }
        let g = fwd
            .binding(&t.name)
            .and_then(|v| grads.get(v))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        t.set_grad(g);
    }
}

/// Logits for a batch without gradient tracking.
pub fn logits(model: &Transformer, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<f32>> {
    let mut g = Graph::inference();
    let f = forward(&mut g, model, tokens, batch, seq)?;
    Ok(g.value(f.logits).to_vec())
}

/// Logits plus routing traces, without gradient tracking.
pub fn logits_and_traces(model: &Transformer, tokens: &[u32], batch: usize, seq: usize) -> Result<(Vec<f32>, Vec<RoutingTrace>)> {
    let mut g = Graph::inference();
    let f = forward(&mut g, model, tokens, batch, seq)?;
    Ok((g.value(f.logits).to_vec(), f.traces))
}
