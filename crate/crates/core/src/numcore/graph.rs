//! Tape-based reverse-mode differentiation over 2-D dense tensors.
//!
//! A [`Graph`] records every primitive as a node in creation order, so the
//! node index is already a topological order and [`Graph::backward`] walks
//! it in reverse. Every value is a row-major `rows x cols` matrix; vectors are
//! single rows.
//!
//! The primitive set is the one the transformer needs and nothing else:
//! matmul, add, elementwise multiply, GELU, softmax, layer normalization,
//! embedding lookup, cross-entropy, causal multi-head attention, and the row
//! gather/scatter plumbing that sparse expert dispatch uses.

use super::scalar::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};
use crate::numcore::tensor::TensorRecord;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    MulCol { a: Var, col: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    TakeCol { a: Var, col: usize },
    TopkSoftmax { logits: Var },
    ConcatRows { parts: Vec<Var> },
    Sum { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::TakeCol { .. } => "take_col",
            Op::TopkSoftmax { .. } => "topk_softmax",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: u64,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
            track: true,
        }
    }

    /// A graph that never tracks gradients, whatever the leaves ask for.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    /// Multiply-add FLOPs spent so far (forward and backward), counting the
    /// matrix products that dominate cost.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf holding `values`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, values: Vec<T>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(values.len(), rows * cols, "leaf shape mismatch");
        let rg = requires_grad && self.track;
        self.push(values, rows, cols, Op::Leaf, rg)
    }

    pub fn constant(&mut self, values: Vec<T>, rows: usize, cols: usize) -> Var {
        self.leaf(values, rows, cols, false)
    }

    /// Binds a tensor record as a leaf. Frozen records become constants.
    pub fn bind(&mut self, record: &TensorRecord) -> Var {
        let (r, c) = record.dims2();
        let values = record.values.iter().map(|&v| T::from_f32(v)).collect();
        let v = self.leaf(values, r, c, record.trainable);
        self.nodes[v.0].label = Some(record.name.clone());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut am = MatRef::new(self.value(a), ar, ac);
        let mut bm = MatRef::new(self.value(b), br, bc);
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        let mut out = vec![T::zero(); m * n];
        gemm(am, bm, T::one(), T::zero(), &mut out, 0, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        self.push(out, m, n, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        self.push(out, r, c, Op::Add { a, b }, rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o = *o + b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, r, c, Op::AddRow { a, row }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        self.push(out, r, c, Op::Mul { a, b }, rg)
    }

    /// Scales row `i` of `a` by `col[i]`, `col` being `rows x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape mismatch");
        let cv = self.value(col);
        let mut out = self.value(a).to_vec();
        for (chunk, &s) in out.chunks_mut(c).zip(cv) {
            for o in chunk.iter_mut() {
                *o = *o * s;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(out, r, c, Op::MulCol { a, col }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(out, r, c, Op::Scale { a, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(out, r, c, Op::Gelu { a }, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(out, r, c, Op::Softmax { a }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let (out, mean, rstd) = {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            let mut out = vec![T::zero(); r * c];
            let mut means = Vec::with_capacity(r);
            let mut rstds = Vec::with_capacity(r);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let (mu, rs) = layer_norm_stats(row);
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * rs * g[j] + b[j];
                }
                means.push(mu);
                rstds.push(rs);
            }
            (out, means, rstds)
        };
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, r, c, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg)
    }

    /// Gathers rows of `table` (`vocab x dim`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(out, ids.len(), d, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    /// Returns a `1 x 1` node; zero when no row counts.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "cross_entropy target count mismatch");
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if let Some(t) = targets[i] {
                assert!(t < c, "target {t} out of range {c}");
                total -= log_softmax_at(&lv[i * c..(i + 1) * c], t).to_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        self.push(
            vec![T::from_f64(loss)],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Causal multi-head self-attention. `q`, `k`, `v` are `(batch*seq) x dim`
    /// with rows ordered sequence-major; `dim` is split evenly over `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (n, dim) = self.shape(q);
        assert_eq!(n, batch * seq, "attention rows must equal batch*seq");
        assert_eq!(self.shape(k), (n, dim));
        assert_eq!(self.shape(v), (n, dim));
        assert_eq!(dim % heads, 0, "dim must divide by heads");
        let hd = dim / heads;
        let scale = T::one() / T::from_f64((hd as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * dim];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for b in 0..batch {
                for h in 0..heads {
                    let p_off = (b * heads + h) * seq * seq;
                    let p = &mut probs[p_off..p_off + seq * seq];
                    let qb = MatRef::block(qv, dim, b * seq, seq, h * hd, hd);
                    let kb = MatRef::block(kv, dim, b * seq, seq, h * hd, hd);
                    gemm(qb, kb.t(), scale, T::zero(), p, 0, seq);
                    for i in 0..seq {
                        let row = &mut p[i * seq..(i + 1) * seq];
                        softmax_in_place(&mut row[..=i]);
                        for x in row[i + 1..].iter_mut() {
                            *x = T::zero();
                        }
                    }
                    let vb = MatRef::block(vv, dim, b * seq, seq, h * hd, hd);
                    gemm(MatRef::new(p, seq, seq), vb, T::one(), T::zero(), &mut out, b * seq * dim + h * hd, dim);
                }
            }
        }
        self.flops += 4 * (batch * heads * seq * seq * hd) as u64;
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            n,
            dim,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather row {i} out of range {r}");
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(out, idx.len(), c, Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    /// Places row `j` of `a` at row `idx[j]` of an `n_rows x cols` zero matrix
    /// (accumulating on repeated indices).
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, idx.len(), "scatter index count mismatch");
        let av = self.value(a);
        let mut out = vec![T::zero(); n_rows * c];
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < n_rows, "scatter row {i} out of range {n_rows}");
            for k in 0..c {
                out[i * c + k] = out[i * c + k] + av[j * c + k];
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, n_rows, c, Op::ScatterRows { a, idx: idx.to_vec() }, rg)
    }

    pub fn take_col(&mut self, a: Var, col: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(col < c);
        let out = self.value(a).chunks(c).map(|row| row[col]).collect();
        let rg = self.rg(&[a]);
        self.push(out, r, 1, Op::TakeCol { a, col }, rg)
    }

    /// Softmax over the entries of each row where `selected` is true; all
    /// other entries are exactly zero. Every row must select at least one entry.
    pub fn topk_softmax(&mut self, logits: Var, selected: &[bool]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(selected.len(), r * c, "selection mask shape mismatch");
        let lv = self.value(logits);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let sel = &selected[i * c..(i + 1) * c];
            let row = &lv[i * c..(i + 1) * c];
            masked_softmax(row, sel, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[logits]);
        self.push(out, r, c, Op::TopkSoftmax { logits }, rg)
    }

    /// Stacks equally wide matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(out, rows, c, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s], 1, 1, Op::Sum { a }, rg)
    }

    fn describe(&self, i: usize) -> String {
        let n = &self.nodes[i];
        match &n.label {
            Some(l) => format!("#{i} {} ({l})", n.op.name()),
            None => format!("#{i} {}", n.op.name()),
        }
    }

    /// Index and description of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
            .map(|i| self.describe(i))
    }

    /// Reverse pass from a scalar `loss`. Every node that requires a gradient
    /// and is reachable from `loss` gets one; frozen leaves get none.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        if !self.value(loss)[0].is_finite() {
            let node = self.first_non_finite().unwrap_or_else(|| self.describe(loss.0));
            return Err(Error::Numeric { node });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        let mut extra_flops = 0u64;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ar, ac) = self.shape(*a);
                    let (br, bc) = self.shape(*b);
                    let gm = MatRef::new(&g, rows, cols);
                    if self.requires_grad(*a) {
                        // dA = dC · op(B)^T, transposed back when A was used transposed.
                        let bm = MatRef::new(self.value(*b), br, bc);
                        let bop = if *tb { bm.t() } else { bm };
                        let da = if *ta {
                            let mut out = vec![T::zero(); ar * ac];
                            gemm(bop, gm.t(), T::one(), T::zero(), &mut out, 0, ac);
                            out
                        } else {
                            let mut out = vec![T::zero(); ar * ac];
                            gemm(gm, bop.t(), T::one(), T::zero(), &mut out, 0, ac);
                            out
                        };
                        extra_flops += 2 * (rows * cols * if *ta { ar } else { ac }) as u64;
                        acc(&mut grads, &self.nodes, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let am = MatRef::new(self.value(*a), ar, ac);
                        let aop = if *ta { am.t() } else { am };
                        let db = if *tb {
                            let mut out = vec![T::zero(); br * bc];
                            gemm(gm.t(), aop, T::one(), T::zero(), &mut out, 0, bc);
                            out
                        } else {
                            let mut out = vec![T::zero(); br * bc];
                            gemm(aop.t(), gm, T::one(), T::zero(), &mut out, 0, bc);
                            out
                        };
                        extra_flops += 2 * (rows * cols * if *tb { bc } else { br }) as u64;
                        acc(&mut grads, &self.nodes, *b, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(*a) {
                        acc(&mut grads, &self.nodes, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        acc(&mut grads, &self.nodes, *b, g);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.requires_grad(*row) {
                        let mut dr = vec![T::zero(); cols];
                        for chunk in g.chunks(cols) {
                            for (d, &x) in dr.iter_mut().zip(chunk) {
                                *d = *d + x;
                            }
                        }
                        acc(&mut grads, &self.nodes, *row, dr);
                    }
                    if self.requires_grad(*a) {
                        acc(&mut grads, &self.nodes, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires_grad(*a) {
                        let d = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, &self.nodes, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, &self.nodes, *b, d);
                    }
                }
                Op::MulCol { a, col } => {
                    let cv = self.value(*col);
                    if self.requires_grad(*col) {
                        let av = self.value(*a);
                        let d = g
                            .chunks(cols)
                            .zip(av.chunks(cols))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                            .collect();
                        acc(&mut grads, &self.nodes, *col, d);
                    }
                    if self.requires_grad(*a) {
                        let mut d = g;
                        for (chunk, &s) in d.chunks_mut(cols).zip(cv) {
                            for x in chunk.iter_mut() {
                                *x = *x * s;
                            }
                        }
                        acc(&mut grads, &self.nodes, *a, d);
                    }
                }
                Op::Scale { a, factor } => {
                    let d = g.iter().map(|&x| x * *factor).collect();
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::Gelu { a } => {
                    let d = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * gelu_grad(y)).collect();
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::Softmax { a } => {
                    let y = &node.value;
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let c = cols;
                    let nf = T::from_f64(c as f64);
                    if self.requires_grad(*beta) {
                        let mut db = vec![T::zero(); c];
                        for chunk in g.chunks(c) {
                            for (d, &v) in db.iter_mut().zip(chunk) {
                                *d = *d + v;
                            }
                        }
                        acc(&mut grads, &self.nodes, *beta, db);
                    }
                    if self.requires_grad(*gamma) {
                        let mut dg = vec![T::zero(); c];
                        for r in 0..rows {
                            for j in 0..c {
                                let xh = (xv[r * c + j] - mean[r]) * rstd[r];
                                dg[j] = dg[j] + g[r * c + j] * xh;
                            }
                        }
                        acc(&mut grads, &self.nodes, *gamma, dg);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![T::zero(); rows * c];
                        let mut dxh = vec![T::zero(); c];
                        for r in 0..rows {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..c {
                                let xh = (xv[r * c + j] - mean[r]) * rstd[r];
                                dxh[j] = g[r * c + j] * gv[j];
                                s1 = s1 + dxh[j];
                                s2 = s2 + dxh[j] * xh;
                            }
                            let m1 = s1 / nf;
                            let m2 = s2 / nf;
                            for j in 0..c {
                                let xh = (xv[r * c + j] - mean[r]) * rstd[r];
                                dx[r * c + j] = rstd[r] * (dxh[j] - m1 - xh * m2);
                            }
                        }
                        acc(&mut grads, &self.nodes, *x, dx);
                    }
                }
                Op::Embedding { table, ids } => {
                    let (v, d) = self.shape(*table);
                    let mut dt = vec![T::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                    acc(&mut grads, &self.nodes, *table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let (r, c) = self.shape(*logits);
                    let mut d = vec![T::zero(); r * c];
                    if *count > 0 {
                        let s = g[0] / T::from_f64(*count as f64);
                        for (i, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                for j in 0..c {
                                    d[i * c + j] = probs[i * c + j] * s;
                                }
                                d[i * c + t] = d[i * c + t] - s;
                            }
                        }
                    }
                    acc(&mut grads, &self.nodes, *logits, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (n, dim) = self.shape(*q);
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let hd = dim / heads;
                    let scale = T::one() / T::from_f64((hd as f64).sqrt());
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let mut dq = vec![T::zero(); n * dim];
                    let mut dk = vec![T::zero(); n * dim];
                    let mut dv = vec![T::zero(); n * dim];
                    let mut dp = vec![T::zero(); seq * seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p_off = (b * heads + h) * seq * seq;
                            let p = &probs[p_off..p_off + seq * seq];
                            let pm = MatRef::new(p, seq, seq);
                            let gb = MatRef::block(&g, dim, b * seq, seq, h * hd, hd);
                            let out_off = b * seq * dim + h * hd;
                            // dV = P^T dO
                            gemm(pm.t(), gb, T::one(), T::zero(), &mut dv, out_off, dim);
                            // dP = dO V^T
                            let vb = MatRef::block(vv, dim, b * seq, seq, h * hd, hd);
                            gemm(gb, vb.t(), T::one(), T::zero(), &mut dp, 0, seq);
                            // dS = P * (dP - rowsum(dP * P))
                            for i in 0..seq {
                                let pr = &p[i * seq..(i + 1) * seq];
                                let dr = &mut dp[i * seq..(i + 1) * seq];
                                let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                                for j in 0..=i {
                                    dr[j] = pr[j] * (dr[j] - dot);
                                }
                                for x in dr[i + 1..].iter_mut() {
                                    *x = T::zero();
                                }
                            }
                            let ds = MatRef::new(&dp, seq, seq);
                            let kb = MatRef::block(kv, dim, b * seq, seq, h * hd, hd);
                            let qb = MatRef::block(qv, dim, b * seq, seq, h * hd, hd);
                            gemm(ds, kb, scale, T::zero(), &mut dq, out_off, dim);
                            gemm(ds.t(), qb, scale, T::zero(), &mut dk, out_off, dim);
                        }
                    }
                    extra_flops += 8 * (batch * heads * seq * seq * hd) as u64;
                    if self.requires_grad(*q) {
                        acc(&mut grads, &self.nodes, *q, dq);
                    }
                    if self.requires_grad(*k) {
                        acc(&mut grads, &self.nodes, *k, dk);
                    }
                    if self.requires_grad(*v) {
                        acc(&mut grads, &self.nodes, *v, dv);
                    }
                }
                Op::GatherRows { a, idx } => {
                    let (r, c) = self.shape(*a);
                    let mut d = vec![T::zero(); r * c];
                    for (j, &i) in idx.iter().enumerate() {
                        for k in 0..c {
                            d[i * c + k] = d[i * c + k] + g[j * c + k];
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::ScatterRows { a, idx } => {
                    let mut d = Vec::with_capacity(idx.len() * cols);
                    for &i in idx {
                        d.extend_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::TakeCol { a, col } => {
                    let (r, c) = self.shape(*a);
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        d[i * c + col] = g[i];
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::TopkSoftmax { logits } => {
                    let y = &node.value;
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, &self.nodes, *logits, d);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.requires_grad(p) {
                            acc(&mut grads, &self.nodes, p, g[off..off + r * c].to_vec());
                        }
                        off += r * c;
                    }
                }
                Op::Sum { a } => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, &self.nodes, *a, vec![g[0]; r * c]);
                }
            }
        }
        self.flops += extra_flops;
        // Only leaves keep their gradients; interior nodes were consumed above.
        Ok(Gradients { grads })
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, d: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

/// `log softmax(row)[t]`, computed stably.
pub fn log_softmax_at<T: Scalar>(row: &[T], t: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    row[t] - m - s.ln()
}

/// Softmax restricted to `sel`; unselected outputs are zero.
pub fn masked_softmax<T: Scalar>(row: &[T], sel: &[bool], out: &mut [T]) {
    let m = row
        .iter()
        .zip(sel)
        .filter(|(_, &s)| s)
        .map(|(&x, _)| x)
        .fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for j in 0..row.len() {
        out[j] = if sel[j] { (row[j] - m).exp() } else { T::zero() };
        s = s + out[j];
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

/// Mean and reciprocal standard deviation (biased variance) of a row.
pub fn layer_norm_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    (mu, T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_vector_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(vec![0.3, -1.0, 2.0], 1, 3, true);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_class_cross_entropy_gradient_is_symmetric() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(vec![0.0, 0.0], 1, 2, true);
        let l = g.cross_entropy(z, &[Some(0)]);
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(vec![1.0, 2.0], 1, 2, true);
        let c = g.constant(vec![3.0, 4.0], 1, 2);
        let m = g.mul(w, c);
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_loss_names_first_bad_node() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(vec![1.0, f32::INFINITY], 1, 2, true);
        g.set_label(w, "weights");
        let z = g.scale(w, 0.0);
        let l = g.sum(z);
        match g.backward(l) {
            Err(Error::Numeric { node }) => assert!(node.contains("weights"), "{node}"),
            other => panic!("expected numeric failure, got {:?}", other.err()),
        }
    }

    #[test]
    fn masked_softmax_zeroes_unselected() {
        let mut out = [0.0f64; 3];
        masked_softmax(&[2.0, 5.0, 1.0], &[true, false, true], &mut out);
        assert_eq!(out[1], 0.0);
        assert!((out[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_first_position_copies_value() {
        // With a causal mask the first query only sees itself.
        let mut g = Graph::<f64>::new();
        let q = g.leaf(vec![1.0, 0.0, 0.5, 0.5], 2, 2, false);
        let k = g.leaf(vec![0.2, 0.1, 0.3, 0.9], 2, 2, false);
        let v = g.leaf(vec![7.0, 8.0, 1.0, 2.0], 2, 2, false);
        let o = g.attention(q, k, v, 1, 2, 1);
        assert_eq!(&g.value(o)[..2], &[7.0, 8.0]);
    }
}
