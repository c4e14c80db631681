//! Finite-difference gradient oracle over randomly generated graphs in f64.

use flexmerge::numcore::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Absolute scale below which a component is compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub struct Param {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// A scalar function of its parameters, built fresh on every call.
pub struct Case {
    pub name: &'static str,
    pub params: Vec<Param>,
    pub build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>,
}

impl Case {
    fn eval(&self, params: &[Vec<f64>], track: bool) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .zip(params)
            .map(|(p, v)| g.leaf(v.clone(), p.rows, p.cols, track))
            .collect();
        let loss = (self.build)(&mut g, &vars);
        let value = g.value(loss)[0];
        if !track {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).expect("finite loss");
        let gs = vars.iter().zip(&self.params).map(|(&v, p)| grads.get(v).map(|x| x.to_vec()).unwrap_or(vec![0.0; p.values.len()])).collect();
        (value, gs)
    }

    /// Worst relative error between analytic and central-difference gradients.
    pub fn max_rel_error(&self) -> f64 {
        let base: Vec<Vec<f64>> = self.params.iter().map(|p| p.values.clone()).collect();
        let (_, analytic) = self.eval(&base, true);
        let mut worst = 0.0f64;
        for (pi, p) in self.params.iter().enumerate() {
            for j in 0..p.values.len() {
                let mut plus = base.clone();
                plus[pi][j] += STEP;
                let mut minus = base.clone();
                minus[pi][j] -= STEP;
                let numeric = (self.eval(&plus, false).0 - self.eval(&minus, false).0) / (2.0 * STEP);
                let a = analytic[pi][j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
            }
        }
        worst
    }
}

fn param(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Param {
    Param {
        values: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rows,
        cols,
    }
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduces `x` to a scalar through a fixed random projection so that every
/// output entry gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, w: &[f64]) -> Var {
    let (r, c) = g.shape(x);
    let wv = g.constant(w[..r * c].to_vec(), r, c);
    let y = g.mul(x, wv);
    g.sum(y)
}

/// Random two-layer MLP with a cross-entropy head.
pub fn mlp_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, h, c) = (4, 5, 6, 3);
    let params = vec![param(&mut rng, n, d), param(&mut rng, d, h), param(&mut rng, 1, h), param(&mut rng, h, c), param(&mut rng, 1, c)];
    let targets: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..c))).collect();
    Case {
        name: "mlp",
        params,
        build: Box::new(move |g, p| {
            let h1 = g.matmul(p[0], p[1]);
            let h1 = g.add_row(h1, p[2]);
            let h1 = g.gelu(h1);
            let o = g.matmul(h1, p[3]);
            let o = g.add_row(o, p[4]);
            g.cross_entropy(o, &targets)
        }),
    }
}

/// The `i`-th random case; cases cycle through every graph primitive.
pub fn random_case(i: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ i);
    let w = weights(&mut rng, 256);
    let r = rng.random_range(2..5);
    let c = rng.random_range(2..5);
    let k = rng.random_range(2..5);
    match i % 14 {
        0 => Case {
            name: "matmul",
            params: vec![param(&mut rng, r, k), param(&mut rng, k, c)],
            build: Box::new(move |g, p| {
                let y = g.matmul(p[0], p[1]);
                project(g, y, &w)
            }),
        },
        1 => {
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a = if ta { param(&mut rng, k, r) } else { param(&mut rng, r, k) };
            let b = if tb { param(&mut rng, c, k) } else { param(&mut rng, k, c) };
            Case {
                name: "matmul_t",
                params: vec![a, b],
                build: Box::new(move |g, p| {
                    let y = g.matmul_t(p[0], ta, p[1], tb);
                    project(g, y, &w)
                }),
            }
        }
        2 => Case {
            name: "add/add_row",
            params: vec![param(&mut rng, r, c), param(&mut rng, r, c), param(&mut rng, 1, c)],
            build: Box::new(move |g, p| {
                let y = g.add(p[0], p[1]);
                let y = g.add_row(y, p[2]);
                project(g, y, &w)
            }),
        },
        3 => Case {
            name: "mul/scale",
            params: vec![param(&mut rng, r, c), param(&mut rng, r, c)],
            build: Box::new(move |g, p| {
                let y = g.mul(p[0], p[1]);
                let y = g.scale(y, 1.7);
                project(g, y, &w)
            }),
        },
        4 => Case {
            name: "mul_col",
            params: vec![param(&mut rng, r, c), param(&mut rng, r, 1)],
            build: Box::new(move |g, p| {
                let y = g.mul_col(p[0], p[1]);
                project(g, y, &w)
            }),
        },
        5 => Case {
            name: "gelu",
            params: vec![param(&mut rng, r, c)],
            build: Box::new(move |g, p| {
                let x = g.scale(p[0], 3.0);
                let y = g.gelu(x);
                project(g, y, &w)
            }),
        },
        6 => Case {
            name: "softmax",
            params: vec![param(&mut rng, r, c)],
            build: Box::new(move |g, p| {
                let y = g.softmax(p[0]);
                project(g, y, &w)
            }),
        },
        7 => Case {
            name: "layer_norm",
            params: vec![param(&mut rng, r, c + 2), param(&mut rng, 1, c + 2), param(&mut rng, 1, c + 2)],
            build: Box::new(move |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2]);
                project(g, y, &w)
            }),
        },
        8 => {
            let vocab = 6;
            let ids: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..vocab)).collect();
            Case {
                name: "embedding",
                params: vec![param(&mut rng, vocab, c)],
                build: Box::new(move |g, p| {
                    let y = g.embedding(p[0], &ids);
                    project(g, y, &w)
                }),
            }
        }
        9 => {
            let targets: Vec<Option<usize>> = (0..r + 1).map(|j| if j == 1 { None } else { Some(rng.random_range(0..c)) }).collect();
            Case {
                name: "cross_entropy",
                params: vec![param(&mut rng, r + 1, c)],
                build: Box::new(move |g, p| g.cross_entropy(p[0], &targets)),
            }
        }
        10 => {
            let (batch, seq, heads) = (2, 3, 2);
            let dim = 4;
            Case {
                name: "attention",
                params: vec![param(&mut rng, batch * seq, dim), param(&mut rng, batch * seq, dim), param(&mut rng, batch * seq, dim)],
                build: Box::new(move |g, p| {
                    let y = g.attention(p[0], p[1], p[2], batch, seq, heads);
                    project(g, y, &w)
                }),
            }
        }
        11 => {
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
            let rows = r + 1;
            let scatter_to: Vec<usize> = (0..k).map(|_| rng.random_range(0..rows)).collect();
            Case {
                name: "gather/scatter",
                params: vec![param(&mut rng, r, c)],
                build: Box::new(move |g, p| {
                    let y = g.gather_rows(p[0], &idx);
                    let y = g.scatter_rows(y, &scatter_to, rows);
                    project(g, y, &w)
                }),
            }
        }
        12 => {
            let e = c + 1;
            let mask: Vec<bool> = (0..r * e).map(|j| j % e == 0 || rng.random_bool(0.5)).collect();
            let col = rng.random_range(0..e);
            Case {
                name: "topk_softmax/take_col",
                params: vec![param(&mut rng, r, e), param(&mut rng, r, k)],
                build: Box::new(move |g, p| {
                    let s = g.topk_softmax(p[0], &mask);
                    let a = project(g, s, &w);
                    let gate = g.take_col(s, col);
                    let y = g.mul_col(p[1], gate);
                    let b = project(g, y, &w[100..]);
                    g.add(a, b)
                }),
            }
        }
        _ => Case {
            name: "concat_rows/sum",
            params: vec![param(&mut rng, 1, c), param(&mut rng, r, c), param(&mut rng, 1, c)],
            build: Box::new(move |g, p| {
                let y = g.concat_rows(&[p[0], p[1], p[2]]);
                let t = g.gelu(y);
                let s = g.sum(t);
                let q = project(g, y, &w);
                g.add(s, q)
            }),
        },
    }
}
