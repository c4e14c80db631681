//! Merging expert bundles into one mixture-of-experts model, opt-in and
//! opt-out, selection biases and proxy-data router tuning.

pub mod classifier;

use serde::{Deserialize, Serialize};

use crate::branch::ExpertBundle;
use crate::clihub::checkpoint::shared_fingerprint;
use crate::error::{Error, Result};
use crate::lmcore::embed::embed_document;
use crate::lmcore::model::{Transformer, PUBLIC_EXPERT};
use crate::lmcore::train::{train, TrainConfig, TrainLog};
use crate::numcore::tensor::Role;

pub use classifier::{ClassifierConfig, LinearClassifier};

/// Bias given to a merged expert when none is specified.
pub const DEFAULT_BIAS: f32 = -0.5;
/// Largest proxy set allowed, as a fraction of the closed corpus size.
pub const PROXY_CAP_FRACTION: f64 = 0.005;

/// A merged model is an ordinary transformer whose roster lists the experts.
pub type MergedModel = Transformer;

/// Default `top_k` for `n` merged bundles: `min(4, n + 1)`.
pub fn default_top_k(n_bundles: usize) -> usize {
    (n_bundles + 1).min(4)
}

/// The dense model left after dropping every non-public expert. For an
/// untuned merge this is the anchor, bit for bit.
pub fn dense_anchor(model: &MergedModel) -> Transformer {
    let mut dense = model.clone();
    for id in model.roster.iter().skip(1) {
        dense.remove_expert(id).expect("roster id is present");
    }
    dense.config.top_k = 1;
    dense.freeze_all();
    dense
}

/// Fingerprint of the anchor a merged model was built from, router rows
/// excluded.
pub fn anchor_fingerprint_of(model: &MergedModel) -> String {
    shared_fingerprint(&dense_anchor(model))
}

fn check_bundle(anchor_fp: &str, bundle: &ExpertBundle) -> Result<()> {
    if bundle.anchor_fingerprint != anchor_fp {
        return Err(Error::Merge(format!(
            "bundle {} was trained against anchor {}, expected {anchor_fp}",
            bundle.expert_id, bundle.anchor_fingerprint
        )));
    }
    Ok(())
}

/// Builds `[pub] + bundles` at every layer. `biases` defaults to
/// [`DEFAULT_BIAS`] for every bundle and `top_k` to [`default_top_k`].
pub fn assemble(anchor: &Transformer, bundles: &[ExpertBundle], biases: Option<&[f32]>, top_k: Option<usize>) -> Result<MergedModel> {
    if anchor.roster != [PUBLIC_EXPERT] {
        return Err(Error::Merge(format!("anchor must be dense, got roster {:?}", anchor.roster)));
    }
    if let Some(b) = biases {
        if b.len() != bundles.len() {
            return Err(Error::Input(format!("{} biases for {} bundles", b.len(), bundles.len())));
        }
    }
    let anchor_fp = shared_fingerprint(anchor);
    let mut model = anchor.clone();
    model.freeze_all();
    for (i, bundle) in bundles.iter().enumerate() {
        check_bundle(&anchor_fp, bundle)?;
        let bias = biases.map_or(DEFAULT_BIAS, |b| b[i]);
        model.push_expert(&bundle.expert_id, bundle.ffns.clone(), bundle.router_rows.clone(), bias)?;
    }
    model.set_top_k(top_k.unwrap_or_else(|| default_top_k(bundles.len())))?;
    model.freeze_all();
    model.check()?;
    Ok(model)
}

/// Removes an expert entirely; `top_k` is clamped to the new expert count.
pub fn opt_out(model: &MergedModel, expert_id: &str) -> Result<MergedModel> {
    let mut out = model.clone();
    out.remove_expert(expert_id)?;
    Ok(out)
}

/// Adds a bundle back at roster position `at` (appended when `None`). The
/// bundle must match the anchor recovered from `model`.
pub fn opt_in(model: &MergedModel, bundle: &ExpertBundle, at: Option<usize>, bias: f32) -> Result<MergedModel> {
    check_bundle(&anchor_fingerprint_of(model), bundle)?;
    let mut out = model.clone();
    let at = at.unwrap_or(out.roster.len());
    out.insert_expert(at, &bundle.expert_id, bundle.ffns.clone(), bundle.router_rows.clone(), bias)?;
    out.freeze_all();
    Ok(out)
}

/// Sets the bias of one expert. `f32::NEG_INFINITY` disables it.
pub fn set_bias(model: &MergedModel, expert_id: &str, bias: f32) -> Result<MergedModel> {
    let mut out = model.clone();
    out.set_bias(expert_id, bias)?;
    Ok(out)
}

/// Scorer features: the per-layer pooled expert inputs and the pooled final
/// hidden state, concatenated.
pub fn doc_features(anchor: &Transformer, doc: &[u8]) -> Result<Vec<f32>> {
    let e = embed_document(anchor, doc)?;
    let mut out: Vec<f32> = e.per_layer.concat();
    out.extend(e.pooled);
    Ok(out)
}

/// Probability that a document comes from a closed corpus rather than the
/// public one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyScorer {
    pub owner: String,
    /// Size of the closed corpus the proxy set stands in for.
    pub closed_corpus_size: usize,
    pub classifier: LinearClassifier,
}

impl ProxyScorer {
    pub fn validation_accuracy(&self) -> f64 {
        self.classifier.validation_accuracy
    }

    pub fn score_features(&self, features: &[f32]) -> f32 {
        self.classifier.probabilities(features)[1]
    }

    pub fn score(&self, anchor: &Transformer, doc: &[u8]) -> Result<f32> {
        Ok(self.score_features(&doc_features(anchor, doc)?))
    }

    /// Largest cap [`select_proxy`] accepts.
    pub fn max_cap(&self) -> usize {
        (self.closed_corpus_size as f64 * PROXY_CAP_FRACTION).floor() as usize
    }
}

/// Trains a closed-vs-public logistic scorer on anchor document features.
/// The two samples must be the same size.
pub fn train_proxy_classifier(
    anchor: &Transformer,
    owner: &str,
    closed_sample: &[Vec<u8>],
    public_sample: &[Vec<u8>],
    closed_corpus_size: usize,
    cfg: &ClassifierConfig,
) -> Result<ProxyScorer> {
    if closed_sample.len() != public_sample.len() {
        return Err(Error::Input(format!(
            "proxy classifier needs balanced samples, got {} closed and {} public",
            closed_sample.len(),
            public_sample.len()
        )));
    }
    let mut features = Vec::with_capacity(closed_sample.len() * 2);
    let mut labels = Vec::with_capacity(closed_sample.len() * 2);
    for (docs, label) in [(public_sample, 0), (closed_sample, 1)] {
        for d in docs {
            features.push(doc_features(anchor, d)?);
            labels.push(label);
        }
    }
    let classifier = LinearClassifier::fit(&features, &labels, 2, cfg)?;
    Ok(ProxyScorer {
        owner: owner.to_string(),
        closed_corpus_size,
        classifier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySet {
    pub owner: String,
    /// Indices into the public documents the set was drawn from.
    pub doc_indices: Vec<usize>,
    pub scores: Vec<f32>,
    #[serde(skip)]
    pub documents: Vec<Vec<u8>>,
}

impl ProxySet {
    pub fn len(&self) -> usize {
        self.doc_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_indices.is_empty()
    }
}

/// Scores every public document and keeps the `cap` highest, ties broken by
/// lower index. Returns the set and all scores.
pub fn select_proxy(scorer: &ProxyScorer, anchor: &Transformer, public_docs: &[Vec<u8>], cap: usize) -> Result<(ProxySet, Vec<f32>)> {
    if cap > scorer.max_cap() {
        return Err(Error::Sizing(format!(
            "proxy cap {cap} exceeds {} (0.5% of {} closed documents)",
            scorer.max_cap(),
            scorer.closed_corpus_size
        )));
    }
    let scores: Vec<f32> = public_docs.iter().map(|d| scorer.score(anchor, d)).collect::<Result<_>>()?;
    let set = select_top(&scorer.owner, &scores, public_docs, cap);
    Ok((set, scores))
}

/// Top-`cap` selection over precomputed scores.
pub fn select_top(owner: &str, scores: &[f32], public_docs: &[Vec<u8>], cap: usize) -> ProxySet {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(cap);
    ProxySet {
        owner: owner.to_string(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        documents: order.iter().map(|&i| public_docs[i].clone()).collect(),
        doc_indices: order,
    }
}

/// Trains only the router rows (public included) on a uniform mixture of the
/// proxy sets and the public documents. Everything else, biases included,
/// stays bit-identical.
pub fn tune_router(model: &MergedModel, proxy_sets: &[ProxySet], public_docs: &[Vec<u8>], cfg: &TrainConfig) -> Result<(MergedModel, TrainLog)> {
    if proxy_sets.is_empty() {
        return Err(Error::Input("router tuning needs at least one proxy set".into()));
    }
    let mut pools: Vec<&[Vec<u8>]> = proxy_sets.iter().filter(|p| !p.documents.is_empty()).map(|p| p.documents.as_slice()).collect();
    if pools.is_empty() {
        return Err(Error::Input("every proxy set is empty".into()));
    }
    pools.push(public_docs);
    let mut out = model.clone();
    out.set_trainable(|t| t.role == Role::RouterRow);
    let log = train(&mut out, pools, cfg)?;
    out.freeze_all();
    Ok((out, log))
}
