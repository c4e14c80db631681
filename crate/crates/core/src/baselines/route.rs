//! Query routing: a domain classifier picks one model per query and that
//! model alone produces the output.

use crate::error::{Error, Result};
use crate::evalx::sequence_nll;
use crate::lmcore::generate::{generate, SamplingParams};
use crate::lmcore::model::Transformer;
use crate::lmcore::tokenizer::encode;
use crate::merge::{doc_features, ClassifierConfig, LinearClassifier};

/// One-vs-rest linear classifiers over anchor document features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRouter {
    pub domains: Vec<String>,
    pub classifiers: Vec<LinearClassifier>,
}

impl DomainRouter {
    pub fn train(anchor: &Transformer, samples: &[(String, Vec<Vec<u8>>)], cfg: &ClassifierConfig) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Input("a domain router needs at least two domains".into()));
        }
        let mut features = Vec::new();
        let mut owner = Vec::new();
        for (i, (_, docs)) in samples.iter().enumerate() {
            for d in docs {
                features.push(doc_features(anchor, d)?);
                owner.push(i);
            }
        }
        let classifiers = (0..samples.len())
            .map(|i| {
                let labels: Vec<usize> = owner.iter().map(|&o| usize::from(o == i)).collect();
                LinearClassifier::fit(&features, &labels, 2, cfg)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            domains: samples.iter().map(|(d, _)| d.clone()).collect(),
            classifiers,
        })
    }

    pub fn scores(&self, features: &[f32]) -> Vec<f32> {
        self.classifiers.iter().map(|c| c.probabilities(features)[1]).collect()
    }

    /// Highest-scoring domain; ties go to the lower index.
    pub fn route_features(&self, features: &[f32]) -> usize {
        let s = self.scores(features);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }

    pub fn route(&self, anchor: &Transformer, query: &[u8]) -> Result<usize> {
        Ok(self.route_features(&doc_features(anchor, query)?))
    }

    /// Fraction of documents routed to their own domain.
    pub fn accuracy(&self, anchor: &Transformer, samples: &[(String, Vec<Vec<u8>>)]) -> Result<f64> {
        let mut right = 0;
        let mut total = 0;
        for (d, docs) in samples {
            let want = self.domains.iter().position(|x| x == d);
            for doc in docs {
                right += usize::from(Some(self.route(anchor, doc)?) == want);
                total += 1;
            }
        }
        Ok(right as f64 / total.max(1) as f64)
    }
}

fn check_models(router: &DomainRouter, models: &[&Transformer]) -> Result<()> {
    if models.len() != router.domains.len() {
        return Err(Error::Input(format!("{} models for {} routed domains", models.len(), router.domains.len())));
    }
    Ok(())
}

/// Routes the query, then generates a continuation with the chosen model.
pub fn classifier_route_generate(
    router: &DomainRouter,
    anchor: &Transformer,
    models: &[&Transformer],
    query: &[u8],
    params: &SamplingParams,
) -> Result<(usize, Vec<u32>)> {
    check_models(router, models)?;
    let i = router.route(anchor, query)?;
    let mut prefix = encode(query);
    prefix.pop();
    Ok((i, generate(models[i], &prefix, params)?))
}

/// Perplexity over `docs` when each document is scored by its routed model.
/// Returns the perplexity and the choice per document.
pub fn classifier_route_perplexity(router: &DomainRouter, anchor: &Transformer, models: &[&Transformer], docs: &[Vec<u8>]) -> Result<(f64, Vec<usize>)> {
    check_models(router, models)?;
    if docs.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut choices = Vec::with_capacity(docs.len());
    for d in docs {
        let i = router.route(anchor, d)?;
        let (t, c) = sequence_nll(models[i], &encode(d))?;
        total += t;
        count += c;
        choices.push(i);
    }
    Ok(((total / count as f64).exp(), choices))
}
