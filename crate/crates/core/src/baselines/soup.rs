use crate::error::{Error, Result};
use crate::evalx::{mean_nll, sequence_nll};
use crate::lmcore::tokenizer::encode;
use crate::lmcore::model::Transformer;
use crate::numcore::tensor::TensorRecord;

fn check_compatible(models: &[&Transformer]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Merge("nothing to average".into()))?;
    for m in &models[1..] {
        if m.config != first.config || m.roster != first.roster {
            return Err(Error::Merge(format!(
                "architecture mismatch: {:?} / {:?} vs {:?} / {:?}",
                m.config, m.roster, first.config, first.roster
            )));
        }
    }
    Ok(())
}

/// Combines every tensor elementwise. Terms are summed in sorted order so the
/// result does not depend on the order of `models`.
fn combine(models: &[&Transformer], term: impl Fn(usize, f32) -> f64, finish: impl Fn(f64) -> f64) -> Result<Transformer> {
    check_compatible(models)?;
    let records: Vec<Vec<TensorRecord>> = models.iter().map(|m| m.to_records()).collect();
    let mut out = records[0].clone();
    let mut terms = vec![0.0f64; models.len()];
    for (j, rec) in out.iter_mut().enumerate() {
        for r in &records[1..] {
            if r[j].name != rec.name || r[j].shape != rec.shape {
                return Err(Error::Merge(format!("tensor mismatch at {}: {} {:?}", rec.name, r[j].name, r[j].shape)));
            }
        }
        for k in 0..rec.values.len() {
            for (i, t) in terms.iter_mut().enumerate() {
                *t = term(i, records[i][j].values[k]);
            }
            terms.sort_by(f64::total_cmp);
            rec.values[k] = finish(terms.iter().sum::<f64>()) as f32;
        }
        rec.trainable = false;
    }
    Transformer::from_records(models[0].config, models[0].roster.clone(), out)
}

/// Elementwise arithmetic mean of all tensors.
pub fn soup_average(models: &[&Transformer]) -> Result<Transformer> {
    let n = models.len() as f64;
    combine(models, |_, x| x as f64, |s| s / n)
}

/// Convex combination with the given weights.
pub fn soup_with_weights(models: &[&Transformer], weights: &[f64]) -> Result<Transformer> {
    if weights.len() != models.len() {
        return Err(Error::Input(format!("{} weights for {} models", weights.len(), models.len())));
    }
    combine(models, |i, x| weights[i] * x as f64, |s| s)
}

/// `softmax(-losses)`; non-finite losses get weight zero.
pub fn soup_weights(losses: &[f64]) -> Result<Vec<f64>> {
    let best = losses.iter().copied().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Input("every loss is non-finite".into()));
    }
    let e: Vec<f64> = losses.iter().map(|&l| if l.is_finite() { (best - l).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Per-input soup weighted by each model's likelihood of `tokens`.
pub fn soup_weighted(models: &[&Transformer], tokens: &[u32]) -> Result<(Transformer, Vec<f64>)> {
    let losses: Vec<f64> = models.iter().map(|m| mean_nll(m, tokens)).collect::<Result<_>>()?;
    let w = soup_weights(&losses)?;
    Ok((soup_with_weights(models, &w)?, w))
}

/// Perplexity where each document is scored by a soup weighted on its first
/// `prefix_len` tokens.
pub fn soup_weighted_perplexity(models: &[&Transformer], docs: &[Vec<u8>], prefix_len: usize) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for d in docs {
        let tokens = encode(d);
        let (soup, _) = soup_weighted(models, &tokens[..prefix_len.clamp(2, tokens.len())])?;
        let (t, c) = sequence_nll(&soup, &tokens)?;
        total += t;
        count += c;
    }
    Ok((total / count as f64).exp())
}
