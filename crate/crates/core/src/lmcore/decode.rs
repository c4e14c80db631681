//! Incremental single-token decoding with per-layer key/value caches.

use crate::error::{Error, Result};
use crate::lmcore::model::Transformer;
use crate::lmcore::moe::{moe_forward, Routing};
use crate::numcore::graph::{layer_norm_stats, softmax_in_place};
use crate::numcore::scalar::{gemm, MatRef};

fn vec_mat(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; cols];
    gemm(MatRef::new(x, 1, x.len()), MatRef::new(w, x.len(), cols), 1.0, 0.0, &mut out, 0, cols);
    out
}

fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let (mu, rs) = layer_norm_stats(x);
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mu) * rs * g + b)
        .collect()
}

/// Anything that yields next-token logits one pushed token at a time.
pub trait LogitSource {
    fn max_context(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn reset(&mut self);
    /// Appends `token` and returns the logits for the following position.
    fn push(&mut self, token: u32) -> Result<Vec<f32>>;
}

pub struct Decoder<'m> {
    model: &'m Transformer,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    /// Routing of the most recent token, one entry per layer.
    pub last_routing: Vec<Routing>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Transformer) -> Self {
        let layers = model.blocks.len();
        Self {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            last_routing: Vec::new(),
        }
    }

    pub fn model(&self) -> &Transformer {
        self.model
    }

    /// Pushes every token and returns the logits after the last one.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut last = Err(Error::Input("empty prefill".into()));
        for &t in tokens {
            last = self.push(t);
            last.as_ref().map_err(|e| Error::Input(e.to_string()))?;
        }
        last
    }
}

impl LogitSource for Decoder<'_> {
    fn max_context(&self) -> usize {
        self.model.config.max_seq_len
    }

    fn len(&self) -> usize {
        self.len
    }

    fn reset(&mut self) {
        for k in &mut self.keys {
            k.clear();
        }
        for v in &mut self.values {
            v.clear();
        }
        self.len = 0;
        self.last_routing.clear();
    }

    fn push(&mut self, token: u32) -> Result<Vec<f32>> {
        let m = self.model;
        let cfg = &m.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} >= vocab size {}", cfg.vocab_size)));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::Input(format!("context full at {} tokens", cfg.max_seq_len)));
        }
        let h = cfg.hidden_dim;
        let pos = self.len;
        let t = token as usize;
        let mut x: Vec<f32> = m.tok_emb.values[t * h..(t + 1) * h]
            .iter()
            .zip(&m.pos_emb.values[pos * h..(pos + 1) * h])
            .map(|(a, b)| a + b)
            .collect();
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let n_ctx = pos + 1;
        let mut routing = Vec::with_capacity(m.blocks.len());
        for (l, block) in m.blocks.iter().enumerate() {
            let a = layer_norm(&x, &block.ln1_gamma.values, &block.ln1_beta.values);
            let q = vec_mat(&a, &block.wq.values, h);
            let k = vec_mat(&a, &block.wk.values, h);
            let v = vec_mat(&a, &block.wv.values, h);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let vals = &self.values[l];
            let mut att = vec![0.0f32; h];
            let mut scores = vec![0.0f32; n_ctx];
            for hh in 0..heads {
                let qh = &q[hh * hd..(hh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * h + hh * hd..j * h + (hh + 1) * hd];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att[hh * hd..(hh + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &vals[j * h + hh * hd..j * h + (hh + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
            let o = vec_mat(&att, &block.wo.values, h);
            for (xi, oi) in x.iter_mut().zip(o) {
                *xi += oi;
            }
            let a2 = layer_norm(&x, &block.ln2_gamma.values, &block.ln2_beta.values);
            let (y, r) = moe_forward(&a2, &block.moe, cfg.top_k, cfg.routing)?;
            for (xi, yi) in x.iter_mut().zip(y) {
                *xi += yi;
            }
            routing.push(r);
        }
        self.len += 1;
        self.last_routing = routing;
        let xf = layer_norm(&x, &m.lnf_gamma.values, &m.lnf_beta.values);
        Ok(vec_mat(&xf, &m.head.values, cfg.vocab_size))
    }
}
