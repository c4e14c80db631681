//! Versioned evaluation reports, written as JSON and as flat CSV rows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalx::extraction::ExtractionResult;
use crate::evalx::{RoutingProfile, SweepRow};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptOutDelta {
    pub expert_id: String,
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
    /// `after / before - 1` per domain.
    pub relative_change: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model_id: String,
    /// Fingerprint of the evaluated model and its configuration.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// RFC 3339; excluded from [`EvalReport::content_hash`].
    pub timestamp: String,
    pub perplexity: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingProfile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub opt_out: Vec<OptOutDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionResult>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl EvalReport {
    pub fn new(model_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            model_id: model_id.into(),
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            timestamp: now(),
            perplexity: BTreeMap::new(),
            routing: None,
            sweep: Vec::new(),
            opt_out: Vec::new(),
            extraction: None,
            extra: BTreeMap::new(),
        }
    }

    /// SHA-256 of the JSON form with the timestamp blanked.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.timestamp.clear();
        let json = serde_json::to_vec(&c).expect("report serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != REPORT_SCHEMA_VERSION {
            return Err(Error::VersionSkew {
                found,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// One row per number: `section, key, sub, expert, value`.
    pub fn csv_rows(&self) -> Vec<[String; 5]> {
        let mut rows = Vec::new();
        let mut push = |a: &str, b: String, c: String, d: String, v: f64| rows.push([a.to_string(), b, c, d, v.to_string()]);
        for (d, p) in &self.perplexity {
            push("perplexity", d.clone(), String::new(), String::new(), *p);
        }
        if let Some(r) = &self.routing {
            for (d, dr) in &r.domains {
                for (l, layer) in dr.fractions.iter().enumerate() {
                    for (e, f) in layer.iter().enumerate() {
                        push("routing", d.clone(), l.to_string(), r.roster[e].clone(), *f);
                    }
                }
            }
        }
        for row in &self.sweep {
            for (d, p) in &row.perplexity {
                push("sweep", d.clone(), row.k.to_string(), String::new(), *p);
            }
            push("sweep", "mean".into(), row.k.to_string(), String::new(), row.mean);
        }
        for o in &self.opt_out {
            for (d, c) in &o.relative_change {
                push("opt_out", d.clone(), String::new(), o.expert_id.clone(), *c);
            }
        }
        if let Some(x) = &self.extraction {
            push("extraction", "rate".into(), String::new(), String::new(), x.rate);
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["section", "key", "sub", "expert", "value"];
        w.write_record(header).map_err(csv_err)?;
        w.write_record(["schema_version", "", "", "", &self.schema_version.to_string()]).map_err(csv_err)?;
        for r in self.csv_rows() {
            w.write_record(&r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        write_file(&stem.with_extension("json"), self.to_json()?.as_bytes())?;
        write_file(&stem.with_extension("csv"), self.to_csv()?.as_bytes())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

impl ExtractionResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["schema_version", "doc", "best_similarity", "extracted"]).map_err(csv_err)?;
        for (i, s) in self.best_similarity.iter().enumerate() {
            w.write_record([
                REPORT_SCHEMA_VERSION.to_string(),
                i.to_string(),
                s.to_string(),
                (*s >= self.params.threshold).to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timestamp_and_json_round_trips() {
        let mut a = EvalReport::new("m", "abc");
        a.perplexity.insert("math".into(), 3.5);
        a.seeds.insert("eval".into(), 1);
        let mut b = a.clone();
        b.timestamp = "1999-01-01T00:00:00Z".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.perplexity.insert("math".into(), 3.6);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(EvalReport::from_json(&a.to_json().unwrap()).unwrap(), a);
        let csv = a.to_csv().unwrap();
        assert!(csv.starts_with("section,key,sub,expert,value\nschema_version,,,,1\nperplexity,math,,,3.5"));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let mut v = serde_json::to_value(EvalReport::new("m", "x")).unwrap();
        v["schema_version"] = 9.into();
        assert!(matches!(EvalReport::from_json(&v.to_string()), Err(Error::VersionSkew { found: 9, .. })));
    }
}
