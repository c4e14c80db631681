//! Line-oriented corpus files: one escaped document per line plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{docs_sha256, DomainCorpus, Splits};
use crate::error::{Error, Result};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub domain_id: String,
    pub seed: u64,
    pub n_docs: usize,
    pub counts: SplitCounts,
    pub sha256: String,
    pub documents_file: String,
    pub splits: Splits,
}

/// Escapes backslash, newline and carriage return so a document fits on one line.
pub fn escape_line(doc: &[u8]) -> String {
    let mut out = String::with_capacity(doc.len());
    for &b in doc {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            _ => out.push(b as char),
        }
    }
    out
}

pub fn unescape_line(line: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            if c as u32 > 0xff {
                return Err(Error::Input(format!("non-byte character {c:?} in corpus line")));
            }
            out.push(c as u32 as u8);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            other => return Err(Error::Input(format!("bad escape \\{other:?} in corpus line"))),
        }
    }
    Ok(out)
}

fn paths(dir: &Path, domain_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{domain_id}.txt")), dir.join(format!("{domain_id}.manifest.json")))
}

/// Writes `<domain>.txt` and `<domain>.manifest.json` into `dir`.
pub fn export_corpus(corpus: &DomainCorpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (docs_path, manifest_path) = paths(dir, &corpus.domain_id);
    let mut text = String::new();
    for d in &corpus.documents {
        text.push_str(&escape_line(d));
        text.push('\n');
    }
    fs::write(&docs_path, text).map_err(|e| Error::io(&docs_path, e))?;
    let manifest = CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        domain_id: corpus.domain_id.clone(),
        seed: corpus.seed,
        n_docs: corpus.documents.len(),
        counts: SplitCounts {
            train: corpus.splits.train.len(),
            validation: corpus.splits.validation.len(),
            heldout: corpus.splits.heldout.len(),
        },
        sha256: corpus.sha256(),
        documents_file: format!("{}.txt", corpus.domain_id),
        splits: corpus.splits.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Reads a corpus written by [`export_corpus`], verifying count and hash.
pub fn import_corpus(dir: &Path, domain_id: &str) -> Result<DomainCorpus> {
    let (_, manifest_path) = paths(dir, domain_id);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&raw)?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::VersionSkew {
            found: manifest.schema_version,
            expected: CORPUS_SCHEMA_VERSION,
        });
    }
    let docs_path = dir.join(&manifest.documents_file);
    let text = fs::read_to_string(&docs_path).map_err(|e| Error::io(&docs_path, e))?;
    let documents = text.lines().map(unescape_line).collect::<Result<Vec<_>>>()?;
    if documents.len() != manifest.n_docs {
        return Err(Error::Input(format!(
            "{} holds {} documents, manifest says {}",
            docs_path.display(),
            documents.len(),
            manifest.n_docs
        )));
    }
    let sha = docs_sha256(&documents);
    if sha != manifest.sha256 {
        return Err(Error::FingerprintMismatch {
            path: docs_path,
            stored: manifest.sha256,
            computed: sha,
        });
    }
    Ok(DomainCorpus {
        domain_id: manifest.domain_id,
        seed: manifest.seed,
        documents,
        splits: manifest.splits,
    })
}
