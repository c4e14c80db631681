//! Standardized softmax regression trained full-batch with AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::graph::{softmax_in_place, Graph};
use crate::numcore::optim::{AdamWConfig, CosineSchedule, OptimizerState};
use crate::numcore::tensor::{Role, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of examples held out for the reported accuracy.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            weight_decay: 0.01,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
    pub weights: TensorRecord,
    pub bias: TensorRecord,
    pub n_classes: usize,
    /// Accuracy on the held-out part of the training data.
    pub validation_accuracy: f64,
}

fn standardizer(rows: &[&Vec<f32>], d: usize) -> (Vec<f32>, Vec<f32>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-8 { (1.0 / v.sqrt()) as f32 } else { 0.0 }).collect();
    (mean.into_iter().map(|m| m as f32).collect(), scale)
}

impl LinearClassifier {
    /// Fits on `features` with integer `labels`. A deterministic shuffle
    /// holds out `validation_fraction` of the examples for the accuracy.
    pub fn fit(features: &[Vec<f32>], labels: &[usize], n_classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Input("classifier needs matching, non-empty features and labels".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Input("feature vectors must share a non-zero width".into()));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::Input(format!("label out of range for {n_classes} classes")));
        }
        let mut present = vec![false; n_classes];
        for &l in labels {
            present[l] = true;
        }
        if n_classes < 2 || present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::Input("degenerate labels: need at least two classes present".into()));
        }
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n_val = ((features.len() as f64) * cfg.validation_fraction).round() as usize;
        let n_val = n_val.min(features.len() - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let train_rows: Vec<&Vec<f32>> = train_idx.iter().map(|&i| &features[i]).collect();
        let (mean, scale) = standardizer(&train_rows, d);
        let mut clf = Self {
            mean,
            scale,
            weights: TensorRecord::zeros("classifier.weights", vec![d, n_classes], Role::Other),
            bias: TensorRecord::zeros("classifier.bias", vec![n_classes], Role::Other),
            n_classes,
            validation_accuracy: 0.0,
        };
        clf.weights.trainable = true;
        clf.bias.trainable = true;
        let x: Vec<f32> = train_idx.iter().flat_map(|&i| clf.standardize(&features[i])).collect();
        let targets: Vec<Option<usize>> = train_idx.iter().map(|&i| Some(labels[i])).collect();
        let mut opt = OptimizerState::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            CosineSchedule {
                base_lr: cfg.lr,
                warmup_steps: 0,
                total_steps: cfg.steps.max(1) as u64,
                final_lr_fraction: 0.1,
            },
        );
        for _ in 0..cfg.steps {
            let mut g: Graph<f32> = Graph::new();
            let xv = g.constant(x.clone(), train_idx.len(), d);
            let w = g.bind(&clf.weights);
            let b = g.bind(&clf.bias);
            let z = g.matmul(xv, w);
            let z = g.add_row(z, b);
            let loss = g.cross_entropy(z, &targets);
            let grads = g.backward(loss)?;
            clf.weights.set_grad(grads.get(w).expect("weights grad").to_vec());
            clf.bias.set_grad(grads.get(b).expect("bias grad").to_vec());
            opt.step([&mut clf.weights, &mut clf.bias])?;
        }
        clf.weights.grad = None;
        clf.bias.grad = None;
        clf.weights.trainable = false;
        clf.bias.trainable = false;
        let eval_idx: &[usize] = if val_idx.is_empty() { train_idx } else { val_idx };
        let correct = eval_idx.iter().filter(|&&i| clf.predict(&features[i]) == labels[i]).count();
        clf.validation_accuracy = correct as f64 / eval_idx.len() as f64;
        Ok(clf)
    }

    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let z = self.standardize(x);
        let c = self.n_classes;
        let mut out = self.bias.values.clone();
        for (i, &zi) in z.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += zi * self.weights.values[i * c + k];
            }
        }
        out
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f32> {
        let mut p = self.logits(x);
        softmax_in_place(&mut p);
        p
    }

    /// Most likely class; ties go to the lower index.
    pub fn predict(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        let correct = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        correct as f64 / features.len().max(1) as f64
    }
}
