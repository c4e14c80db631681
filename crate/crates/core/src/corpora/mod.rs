//! Deterministic synthetic corpora: one public mix plus closed domains with
//! distinct grammars, split into train/validation/heldout.

pub mod export;
pub mod generators;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use export::{export_corpus, import_corpus, CorpusManifest};
pub use generators::{generator, Generator, DOMAINS, MAX_UNIT_LEN};

pub const PUBLIC_DOMAIN: &str = "public_mix";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Heldout,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Heldout];
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Heldout => &self.heldout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    pub min_len: usize,
    pub max_len: usize,
    pub fractions: [f64; 3],
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            min_len: 64,
            max_len: 512,
            fractions: [0.9, 0.05, 0.05],
        }
    }
}

impl CorpusOptions {
    /// Short documents, as used by the extraction experiments.
    pub fn short() -> Self {
        Self {
            min_len: 64,
            max_len: 160,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub domain_id: String,
    pub seed: u64,
    pub documents: Vec<Vec<u8>>,
    pub splits: Splits,
}

impl DomainCorpus {
    pub fn docs(&self, kind: SplitKind) -> Vec<Vec<u8>> {
        self.splits.get(kind).iter().map(|&i| self.documents[i].clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// SHA-256 of the concatenated documents, hex encoded.
    pub fn sha256(&self) -> String {
        docs_sha256(&self.documents)
    }
}

pub fn docs_sha256(docs: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update(d);
    }
    hex::encode(h.finalize())
}

fn stream_seed(domain_id: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(format!("{domain_id}:{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn make_document(g: &dyn Generator, rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> Vec<u8> {
    use rand::Rng;
    let target = rng.random_range(min_len..=max_len);
    let mut doc = String::new();
    while doc.len() < target {
        let unit = g.unit(rng);
        if doc.len() + unit.len() > max_len {
            // doc.len() > max_len - MAX_UNIT_LEN >= min_len here.
            break;
        }
        doc.push_str(&unit);
    }
    doc.into_bytes()
}

/// Generates `n_docs` documents with the default options.
pub fn make_corpus(domain_id: &str, seed: u64, n_docs: usize) -> Result<DomainCorpus> {
    make_corpus_with(domain_id, seed, n_docs, &CorpusOptions::default())
}

/// Generates `n_docs` documents of `opts.min_len..=opts.max_len` bytes. The
/// i-th document depends only on `(domain_id, seed, i)`.
pub fn make_corpus_with(domain_id: &str, seed: u64, n_docs: usize, opts: &CorpusOptions) -> Result<DomainCorpus> {
    let g = generator(domain_id)?;
    if opts.min_len == 0 || opts.max_len < opts.min_len + MAX_UNIT_LEN {
        return Err(Error::Config(format!(
            "document length range {}..={} must be non-empty and at least {MAX_UNIT_LEN} bytes wide",
            opts.min_len, opts.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(domain_id, seed));
    let documents: Vec<Vec<u8>> = (0..n_docs).map(|_| make_document(g.as_ref(), &mut rng, opts.min_len, opts.max_len)).collect();
    let splits = split(documents.len(), opts.fractions, seed)?;
    Ok(DomainCorpus {
        domain_id: domain_id.to_string(),
        seed,
        documents,
        splits,
    })
}

/// Deterministic partition of `0..n` into train/validation/heldout. Sizes are
/// rounded from the fractions; train takes the remainder.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_held = (n as f64 * fractions[2]).round() as usize;
    let n_train = n.saturating_sub(n_val + n_held);
    if n_train == 0 || n_val == 0 || n_held == 0 || n_val + n_held > n {
        return Err(Error::Sizing(format!(
            "{n} documents with fractions {fractions:?} leave an empty split ({n_train}/{n_val}/{n_held})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |k: usize| {
        let mut part: Vec<usize> = idx.drain(..k).collect();
        part.sort_unstable();
        part
    };
    let train = take(n_train);
    let validation = take(n_val);
    let heldout = take(n_held);
    Ok(Splits { train, validation, heldout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_rounding() {
        let s = split(100, [0.9, 0.05, 0.05], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.heldout.len()), (90, 5, 5));
        let t = split(100, [0.9, 0.05, 0.05], 2).unwrap();
        assert_eq!((t.train.len(), t.validation.len(), t.heldout.len()), (90, 5, 5));
        assert_ne!(s, t);
    }

    #[test]
    fn splits_partition_the_indices() {
        use proptest::prelude::*;
        proptest!(|(n in 20usize..400, seed in any::<u64>())| {
            let s = split(n, [0.9, 0.05, 0.05], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.heldout).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        });
    }

    #[test]
    fn tiny_corpus_is_a_sizing_error() {
        assert!(matches!(split(5, [0.9, 0.05, 0.05], 0), Err(Error::Sizing(_))));
        assert!(matches!(split(100, [0.9, 0.2, 0.05], 0), Err(Error::Config(_))));
    }

    #[test]
    fn documents_respect_length_bounds() {
        for id in DOMAINS {
            let c = make_corpus(id, 3, 60).unwrap();
            assert!(c.documents.iter().all(|d| (64..=512).contains(&d.len())), "{id}");
            let s = make_corpus_with(id, 3, 40, &CorpusOptions::short()).unwrap();
            assert!(s.documents.iter().all(|d| (64..=160).contains(&d.len())), "{id}");
        }
    }

    #[test]
    fn regeneration_is_byte_identical_and_prefix_stable() {
        let a = make_corpus("code_brackets", 9, 50).unwrap();
        let b = make_corpus("code_brackets", 9, 50).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        let c = make_corpus("code_brackets", 9, 80).unwrap();
        assert_eq!(&c.documents[..50], &a.documents[..]);
        assert_ne!(make_corpus("code_brackets", 10, 50).unwrap().sha256(), a.sha256());
    }

    #[test]
    fn narrow_length_range_is_rejected() {
        let opts = CorpusOptions {
            min_len: 64,
            max_len: 120,
            ..CorpusOptions::default()
        };
        assert!(matches!(make_corpus_with("math_arith", 0, 40, &opts), Err(Error::Config(_))));
    }
}
