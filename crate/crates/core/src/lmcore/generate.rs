//! Sampling and autoregressive generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::decode::{Decoder, LogitSource};
use crate::lmcore::model::Transformer;
use crate::lmcore::tokenizer::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; 0 disables the filter.
    pub top_k: usize,
    /// Nucleus mass in `(0, 1]`; 1 disables the filter.
    pub top_p: f64,
    pub greedy: bool,
    pub seed: u64,
    pub stop_at_eos: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            greedy: false,
            seed: 0,
            stop_at_eos: true,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Final sampling distribution as `(token, probability)` pairs, most likely
/// first, after temperature, top-k and top-p filtering.
pub fn filtered_distribution(logits: &[f32], params: &SamplingParams) -> Vec<(usize, f64)> {
    let t = params.temperature;
    let mut order: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| (i, v as f64 / t))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if params.top_k > 0 {
        order.truncate(params.top_k);
    }
    let max = order.first().map_or(0.0, |p| p.1);
    let mut total = 0.0;
    for p in order.iter_mut() {
        p.1 = (p.1 - max).exp();
        total += p.1;
    }
    for p in order.iter_mut() {
        p.1 /= total;
    }
    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = 0;
        for p in &order {
            cum += p.1;
            keep += 1;
            if cum >= params.top_p {
                break;
            }
        }
        order.truncate(keep.max(1));
        let kept: f64 = order.iter().map(|p| p.1).sum();
        for p in order.iter_mut() {
            p.1 /= kept;
        }
    }
    order
}

/// Draws one token from `logits`.
pub fn sample_token(logits: &[f32], params: &SamplingParams, rng: &mut impl Rng) -> u32 {
    if params.greedy {
        return argmax(logits) as u32;
    }
    let dist = filtered_distribution(logits, params);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(i, p) in &dist {
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    dist.last().map_or(0, |p| p.0 as u32)
}

fn feed(src: &mut dyn LogitSource, tokens: &[u32]) -> Result<Vec<f32>> {
    let mut last = None;
    for &t in tokens {
        last = Some(src.push(t)?);
    }
    last.ok_or_else(|| Error::Input("nothing to feed".into()))
}

/// Generates a continuation of `prefix` from any [`LogitSource`]. When the
/// context fills up, the source is reset and re-fed the most recent half.
/// The returned tokens exclude the prefix and the stopping EOS.
pub fn generate_from(src: &mut dyn LogitSource, prefix: &[u32], params: &SamplingParams) -> Result<Vec<u32>> {
    params.validate()?;
    if prefix.is_empty() {
        return Err(Error::Input("generation needs a non-empty prefix".into()));
    }
    let cap = src.max_context();
    let keep = (cap / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut context: Vec<u32> = prefix.to_vec();
    src.reset();
    let start = context.len().saturating_sub(cap);
    let mut logits = feed(src, &context[start..])?;
    let mut out = Vec::new();
    while out.len() < params.max_new_tokens {
        let tok = sample_token(&logits, params, &mut rng);
        if params.stop_at_eos && tok == EOS {
            break;
        }
        out.push(tok);
        context.push(tok);
        if out.len() == params.max_new_tokens {
            break;
        }
        if src.len() >= cap {
            src.reset();
            logits = feed(src, &context[context.len() - keep..])?;
        } else {
            logits = src.push(tok)?;
        }
    }
    Ok(out)
}

/// Generates a continuation of `prefix` with a single model.
pub fn generate(model: &Transformer, prefix: &[u32], params: &SamplingParams) -> Result<Vec<u32>> {
    let mut d = Decoder::new(model);
    generate_from(&mut d, prefix, params)
}
