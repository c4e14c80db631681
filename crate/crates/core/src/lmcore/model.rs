//! Parameter layout of the transformer. Every feed-forward block is a
//! mixture-of-experts layer; a dense model is the one-expert special case.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lmcore::config::ModelConfig;
use crate::numcore::tensor::{Role, TensorRecord};

/// Roster id of the public expert, always at position 0.
pub const PUBLIC_EXPERT: &str = "pub";

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w_in: TensorRecord,
    pub b_in: TensorRecord,
    pub w_out: TensorRecord,
    pub b_out: TensorRecord,
}

impl Ffn {
    pub fn tensors(&self) -> [&TensorRecord; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut TensorRecord; 4] {
        [&mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out]
    }

    /// Copy of this FFN renamed for another expert slot.
    pub fn renamed(&self, layer: usize, expert: &str) -> Ffn {
        let mut f = self.clone();
        for (t, suffix) in f.tensors_mut().into_iter().zip(FFN_PARTS) {
            t.name = expert_tensor_name(layer, expert, suffix);
            t.grad = None;
        }
        f
    }
}

const FFN_PARTS: [&str; 4] = ["w_in", "b_in", "w_out", "b_out"];

pub fn expert_tensor_name(layer: usize, expert: &str, part: &str) -> String {
    format!("layers.{layer}.experts.{expert}.{part}")
}

pub fn router_row_name(layer: usize, expert: &str) -> String {
    format!("layers.{layer}.router.{expert}")
}

pub fn bias_name(layer: usize, expert: &str) -> String {
    format!("layers.{layer}.bias.{expert}")
}

/// The per-layer expert set: FFNs `M_pub, M_1..M_n`, router rows (the rows of
/// `W_r`) and selection biases, all aligned with the model roster.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<Ffn>,
    pub router: Vec<TensorRecord>,
    pub biases: Vec<f32>,
}

impl MoeLayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Router matrix `W_r` as a dense `(n_experts x hidden)` row-major buffer.
    pub fn router_matrix(&self) -> Vec<f32> {
        self.router.iter().flat_map(|r| r.values.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: TensorRecord,
    pub ln1_beta: TensorRecord,
    pub wq: TensorRecord,
    pub wk: TensorRecord,
    pub wv: TensorRecord,
    pub wo: TensorRecord,
    pub ln2_gamma: TensorRecord,
    pub ln2_beta: TensorRecord,
    pub moe: MoeLayer,
}

impl Block {
    fn shared(&self) -> [&TensorRecord; 8] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    /// Expert ids in router-row order; `roster[0]` is the public expert.
    pub roster: Vec<String>,
    pub tok_emb: TensorRecord,
    pub pos_emb: TensorRecord,
    pub blocks: Vec<Block>,
    pub lnf_gamma: TensorRecord,
    pub lnf_beta: TensorRecord,
    pub head: TensorRecord,
}

fn normal(name: String, shape: Vec<usize>, std: f64, role: Role, rng: &mut ChaCha8Rng) -> TensorRecord {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let values = (0..n).map(|_| dist.sample(rng) as f32).collect();
    TensorRecord::new(name, shape, values, role)
}

/// Fresh FFN for `expert` at `layer`, GPT-2 style init.
pub fn init_ffn(config: &ModelConfig, layer: usize, expert: &str, rng: &mut ChaCha8Rng) -> Ffn {
    let (h, f) = (config.hidden_dim, config.ffn_dim);
    let proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    Ffn {
        w_in: normal(expert_tensor_name(layer, expert, "w_in"), vec![h, f], INIT_STD, Role::ExpertFfn, rng),
        b_in: TensorRecord::zeros(expert_tensor_name(layer, expert, "b_in"), vec![f], Role::ExpertFfn),
        w_out: normal(expert_tensor_name(layer, expert, "w_out"), vec![f, h], proj_std, Role::ExpertFfn, rng),
        b_out: TensorRecord::zeros(expert_tensor_name(layer, expert, "b_out"), vec![h], Role::ExpertFfn),
    }
}

impl Transformer {
    /// Randomly initialized dense model (single public expert). The public
    /// router row starts at zero until it is set from data.
    pub fn init(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.n_experts = 1;
        config.top_k = 1;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, v, s) = (config.hidden_dim, config.vocab_size, config.max_seq_len);
        let proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal("tok_emb".into(), vec![v, h], INIT_STD, Role::Embedding, &mut rng);
        let pos_emb = normal("pos_emb".into(), vec![s, h], INIT_STD, Role::Embedding, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let wq = normal(p("attn.wq"), vec![h, h], INIT_STD, Role::Attention, &mut rng);
            let wk = normal(p("attn.wk"), vec![h, h], INIT_STD, Role::Attention, &mut rng);
            let wv = normal(p("attn.wv"), vec![h, h], INIT_STD, Role::Attention, &mut rng);
            let wo = normal(p("attn.wo"), vec![h, h], proj_std, Role::Attention, &mut rng);
            let ffn = init_ffn(&config, l, PUBLIC_EXPERT, &mut rng);
            blocks.push(Block {
                ln1_gamma: TensorRecord::filled(p("ln1.gamma"), vec![h], 1.0, Role::Norm),
                ln1_beta: TensorRecord::zeros(p("ln1.beta"), vec![h], Role::Norm),
                wq,
                wk,
                wv,
                wo,
                ln2_gamma: TensorRecord::filled(p("ln2.gamma"), vec![h], 1.0, Role::Norm),
                ln2_beta: TensorRecord::zeros(p("ln2.beta"), vec![h], Role::Norm),
                moe: MoeLayer {
                    experts: vec![ffn],
                    router: vec![TensorRecord::zeros(router_row_name(l, PUBLIC_EXPERT), vec![h], Role::RouterRow)],
                    biases: vec![0.0],
                },
            });
        }
        let head = normal("head".into(), vec![h, v], INIT_STD, Role::Head, &mut rng);
        Ok(Self {
            config,
            roster: vec![PUBLIC_EXPERT.to_string()],
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma: TensorRecord::filled("ln_f.gamma", vec![h], 1.0, Role::Norm),
            lnf_beta: TensorRecord::zeros("ln_f.beta", vec![h], Role::Norm),
            head,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.roster.len()
    }

    pub fn expert_index(&self, id: &str) -> Option<usize> {
        self.roster.iter().position(|r| r == id)
    }

    /// Every tensor in a fixed order: embeddings, then per layer the shared
    /// weights followed by each expert's FFN and router row, then the head.
    pub fn tensors(&self) -> Vec<&TensorRecord> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.shared());
            for (ffn, row) in b.moe.experts.iter().zip(&b.moe.router) {
                out.extend(ffn.tensors());
                out.push(row);
            }
        }
        out.extend([&self.lnf_gamma, &self.lnf_beta, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut TensorRecord> {
        let mut out: Vec<&mut TensorRecord> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            let Block {
                ln1_gamma,
                ln1_beta,
                wq,
                wk,
                wv,
                wo,
                ln2_gamma,
                ln2_beta,
                moe,
            } = b;
            out.extend([ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta]);
            for (ffn, row) in moe.experts.iter_mut().zip(moe.router.iter_mut()) {
                out.extend(ffn.tensors_mut());
                out.push(row);
            }
        }
        out.extend([&mut self.lnf_gamma, &mut self.lnf_beta, &mut self.head]);
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors().into_iter().find(|t| t.name == name)
    }

    /// Marks exactly the tensors whose name satisfies `pred` as trainable and
    /// clears all gradient slots.
    pub fn set_trainable(&mut self, pred: impl Fn(&TensorRecord) -> bool) {
        for t in self.tensors_mut() {
            t.trainable = pred(t);
            t.grad = None;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors().into_iter().filter(|t| t.trainable).map(|t| t.name.clone()).collect()
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_| false);
    }

    /// Hashes of every frozen tensor, keyed by name.
    pub fn frozen_hashes(&self) -> BTreeMap<String, String> {
        self.tensors()
            .into_iter()
            .filter(|t| !t.trainable)
            .map(|t| (t.name.clone(), t.content_hash()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Appends an expert: one FFN and router row per layer plus its bias.
    pub fn push_expert(&mut self, id: &str, ffns: Vec<Ffn>, rows: Vec<TensorRecord>, bias: f32) -> Result<()> {
        self.insert_expert(self.roster.len(), id, ffns, rows, bias)
    }

    /// Inserts an expert at roster position `at` (1..=len).
    pub fn insert_expert(&mut self, at: usize, id: &str, ffns: Vec<Ffn>, rows: Vec<TensorRecord>, bias: f32) -> Result<()> {
        if self.expert_index(id).is_some() {
            return Err(Error::Merge(format!("duplicate expert id {id}")));
        }
        validate_expert_id(id)?;
        if at == 0 || at > self.roster.len() {
            return Err(Error::Merge(format!("cannot insert expert at position {at}")));
        }
        if ffns.len() != self.blocks.len() || rows.len() != self.blocks.len() {
            return Err(Error::Merge(format!(
                "expert {id} has {} FFN layers and {} router rows, model has {} layers",
                ffns.len(),
                rows.len(),
                self.blocks.len()
            )));
        }
        if bias > 0.0 || bias.is_nan() {
            return Err(Error::Input(format!("bias for {id} must be <= 0, got {bias}")));
        }
        let h = self.config.hidden_dim;
        for (l, (ffn, row)) in ffns.iter().zip(&rows).enumerate() {
            let want = [vec![h, self.config.ffn_dim], vec![self.config.ffn_dim], vec![self.config.ffn_dim, h], vec![h]];
            for (t, shape) in ffn.tensors().into_iter().zip(want) {
                if t.shape != shape {
                    return Err(Error::Merge(format!("{}: shape {:?} != {:?}", t.name, t.shape, shape)));
                }
            }
            if row.shape != vec![h] {
                return Err(Error::Merge(format!("router row for {id} at layer {l} has shape {:?}", row.shape)));
            }
        }
        for (l, (block, (ffn, mut row))) in self.blocks.iter_mut().zip(ffns.into_iter().zip(rows)).enumerate() {
            row.name = router_row_name(l, id);
            row.role = Role::RouterRow;
            block.moe.experts.insert(at, ffn.renamed(l, id));
            block.moe.router.insert(at, row);
            block.moe.biases.insert(at, bias);
        }
        self.roster.insert(at, id.to_string());
        self.config.n_experts = self.roster.len();
        Ok(())
    }

    /// Removes every tensor and bias belonging to `id`; `top_k` is clamped.
    pub fn remove_expert(&mut self, id: &str) -> Result<usize> {
        if id == PUBLIC_EXPERT {
            return Err(Error::Forbidden("the public expert cannot be removed".into()));
        }
        let idx = self
            .expert_index(id)
            .ok_or_else(|| Error::Input(format!("expert {id} is not in the roster")))?;
        for block in &mut self.blocks {
            block.moe.experts.remove(idx);
            block.moe.router.remove(idx);
            block.moe.biases.remove(idx);
        }
        self.roster.remove(idx);
        self.config.n_experts = self.roster.len();
        self.config.top_k = self.config.top_k.min(self.config.n_experts);
        Ok(idx)
    }

    /// Sets the selection bias of `id` at every layer.
    pub fn set_bias(&mut self, id: &str, bias: f32) -> Result<()> {
        if bias > 0.0 || bias.is_nan() {
            return Err(Error::Input(format!("bias must be <= 0, got {bias}")));
        }
        if id == PUBLIC_EXPERT && bias != 0.0 {
            return Err(Error::Forbidden("the public expert bias is fixed at 0".into()));
        }
        let idx = self
            .expert_index(id)
            .ok_or_else(|| Error::Input(format!("expert {id} is not in the roster")))?;
        for block in &mut self.blocks {
            block.moe.biases[idx] = bias;
        }
        Ok(())
    }

    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_experts() {
            return Err(Error::Config(format!("top_k {k} out of range 1..={}", self.n_experts())));
        }
        self.config.top_k = k;
        Ok(())
    }

    /// Checks the structural invariants tying config, roster and layers together.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.roster.first().map(String::as_str) != Some(PUBLIC_EXPERT) {
            return Err(Error::invariant("public-expert-first", "roster[0] must be the public expert"));
        }
        if self.config.n_experts != self.roster.len() || self.blocks.len() != self.config.n_layers {
            return Err(Error::invariant("roster-shape", "config does not match roster/layers"));
        }
        for b in &self.blocks {
            let m = &b.moe;
            if m.experts.len() != self.roster.len() || m.router.len() != self.roster.len() || m.biases.len() != self.roster.len() {
                return Err(Error::invariant("roster-shape", "layer expert count differs from roster"));
            }
            if m.biases[0] != 0.0 || m.biases.iter().any(|&b| b > 0.0 || b.is_nan()) {
                return Err(Error::invariant("bias-sign", "biases[0] must be 0 and the rest <= 0"));
            }
        }
        Ok(())
    }
}

impl Transformer {
    /// Every tensor plus one `[1]` record per selection bias, in a fixed order.
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut out: Vec<TensorRecord> = self.tensors().into_iter().cloned().collect();
        for t in out.iter_mut() {
            t.grad = None;
        }
        for (l, b) in self.blocks.iter().enumerate() {
            for (id, &bias) in self.roster.iter().zip(&b.moe.biases) {
                out.push(TensorRecord::new(bias_name(l, id), vec![1], vec![bias], Role::RouterBias));
            }
        }
        out
    }

    /// Rebuilds a model from [`Transformer::to_records`] output. Every expected
    /// tensor must be present with the right shape and nothing else may be.
    pub fn from_records(config: ModelConfig, roster: Vec<String>, records: Vec<TensorRecord>) -> Result<Self> {
        config.validate()?;
        let mut map: BTreeMap<String, TensorRecord> = BTreeMap::new();
        for r in records {
            if map.contains_key(&r.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", r.name)));
            }
            map.insert(r.name.clone(), r);
        }
        let (h, f, v, s) = (config.hidden_dim, config.ffn_dim, config.vocab_size, config.max_seq_len);
        let mut take = |name: String, shape: Vec<usize>| -> Result<TensorRecord> {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t)
        };
        let tok_emb = take("tok_emb".into(), vec![v, h])?;
        let pos_emb = take("pos_emb".into(), vec![s, h])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let ln1_gamma = take(p("ln1.gamma"), vec![h])?;
            let ln1_beta = take(p("ln1.beta"), vec![h])?;
            let wq = take(p("attn.wq"), vec![h, h])?;
            let wk = take(p("attn.wk"), vec![h, h])?;
            let wv = take(p("attn.wv"), vec![h, h])?;
            let wo = take(p("attn.wo"), vec![h, h])?;
            let ln2_gamma = take(p("ln2.gamma"), vec![h])?;
            let ln2_beta = take(p("ln2.beta"), vec![h])?;
            let mut moe = MoeLayer {
                experts: Vec::new(),
                router: Vec::new(),
                biases: Vec::new(),
            };
            for id in &roster {
                moe.experts.push(Ffn {
                    w_in: take(expert_tensor_name(l, id, "w_in"), vec![h, f])?,
                    b_in: take(expert_tensor_name(l, id, "b_in"), vec![f])?,
                    w_out: take(expert_tensor_name(l, id, "w_out"), vec![f, h])?,
                    b_out: take(expert_tensor_name(l, id, "b_out"), vec![h])?,
                });
                moe.router.push(take(router_row_name(l, id), vec![h])?);
                moe.biases.push(take(bias_name(l, id), vec![1])?.values[0]);
            }
            blocks.push(Block {
                ln1_gamma,
                ln1_beta,
                wq,
                wk,
                wv,
                wo,
                ln2_gamma,
                ln2_beta,
                moe,
            });
        }
        let lnf_gamma = take("ln_f.gamma".into(), vec![h])?;
        let lnf_beta = take("ln_f.beta".into(), vec![h])?;
        let head = take("head".into(), vec![h, v])?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let m = Self {
            config,
            roster,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma,
            lnf_beta,
            head,
        };
        m.check()?;
        Ok(m)
    }
}

/// Expert ids become tensor-name segments, so they must not contain dots.
pub fn validate_expert_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("invalid expert id {id:?}: use [A-Za-z0-9_-]")))
    }
}
