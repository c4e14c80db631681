//! Mean-pooled document embeddings read off a frozen model.

use crate::error::{Error, Result};
use crate::lmcore::forward::forward;
use crate::lmcore::model::Transformer;
use crate::lmcore::tokenizer::encode;
use crate::numcore::graph::Graph;

/// Pooled hidden states of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbedding {
    /// Per layer, the mean over tokens of that layer's expert-block input.
    pub per_layer: Vec<Vec<f32>>,
    /// Mean over tokens of the final normalized hidden state.
    pub pooled: Vec<f32>,
}

fn mean_rows(values: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; cols];
    for r in values.chunks(cols).take(rows) {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / rows as f64) as f32).collect()
}

/// Embeds `doc` (encoded with BOS/EOS, truncated to the model context).
pub fn embed_document(model: &Transformer, doc: &[u8]) -> Result<DocEmbedding> {
    let mut tokens = encode(doc);
    tokens.truncate(model.config.max_seq_len);
    let n = tokens.len();
    let h = model.config.hidden_dim;
    let mut g = Graph::inference();
    let f = forward(&mut g, model, &tokens, 1, n)?;
    let per_layer = f.moe_inputs.iter().map(|&v| mean_rows(g.value(v), n, h)).collect();
    let pooled = mean_rows(g.value(f.final_hidden), n, h);
    Ok(DocEmbedding { per_layer, pooled })
}

pub fn embed_documents(model: &Transformer, docs: &[Vec<u8>]) -> Result<Vec<DocEmbedding>> {
    docs.iter().map(|d| embed_document(model, d)).collect()
}

/// Per-layer average of the documents' per-layer embeddings.
pub fn mean_layer_embedding(model: &Transformer, docs: &[Vec<u8>]) -> Result<Vec<Vec<f32>>> {
    if docs.is_empty() {
        return Err(Error::Input("cannot average embeddings of an empty sample".into()));
    }
    let h = model.config.hidden_dim;
    let mut acc = vec![vec![0.0f64; h]; model.config.n_layers];
    for d in docs {
        let e = embed_document(model, d)?;
        for (a, layer) in acc.iter_mut().zip(&e.per_layer) {
            for (x, &v) in a.iter_mut().zip(layer) {
                *x += v as f64;
            }
        }
    }
    let n = docs.len() as f64;
    Ok(acc.into_iter().map(|l| l.into_iter().map(|x| (x / n) as f32).collect()).collect())
}
