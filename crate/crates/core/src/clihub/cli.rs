//! The `flexmerge` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::{
    btm_perplexity, btx_assemble, btx_train, classifier_route_perplexity, dense_branch, soup_average, soup_weighted_perplexity, unrestricted_moe_train,
    DomainRouter, ReferenceMoeConfig,
};
use crate::branch::{embedding_sample, init_branch, init_router_embedding, pretrain_anchor, train_expert, ExpertBundle};
use crate::clihub::checkpoint::{load_model, save_model, ArtifactKind, CheckpointManifest};
use crate::corpora::{export_corpus, import_corpus, make_corpus_with, CorpusOptions, DomainCorpus, SplitKind, PUBLIC_DOMAIN};
use crate::error::{Error, Result};
use crate::evalx::{active_expert_sweep, extraction_attack, opt_out_delta, perplexities, routing_profile, EvalReport, ExtractionParams};
use crate::lmcore::config::ModelConfig;
use crate::lmcore::model::Transformer;
use crate::lmcore::train::TrainConfig;
use crate::merge::{assemble, dense_anchor, opt_out, select_proxy, set_bias, train_proxy_classifier, tune_router, ClassifierConfig};

/// Environment variable that overrides every command's base seed.
pub const SEED_ENV: &str = "FLEXMERGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "flexmerge", version, about = "Train experts against a shared anchor and merge them into a mixture of experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Flat JSON file with training settings; flags below override it.
    #[arg(long = "train-config")]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub load_balance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub ffn: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalSet {
    #[arg(long)]
    pub corpus_dir: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub domains: Vec<String>,
    #[arg(long, default_value = "heldout", value_parser = parse_split)]
    pub split: SplitKind,
    /// Use at most this many documents per domain.
    #[arg(long)]
    pub max_docs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic corpora and write them with manifests.
    GenCorpus {
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        n_docs: usize,
        /// Short documents (64 to 160 bytes).
        #[arg(long)]
        short: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the dense public anchor.
    PretrainPublic {
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = PUBLIC_DOMAIN)]
        domain: String,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one expert against the frozen anchor and write its bundle.
    TrainExpert {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        expert_id: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue pretraining the whole anchor on one corpus.
    DenseBranch {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        domain: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge expert bundles into the anchor.
    Merge {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        experts: Vec<PathBuf>,
        /// One bias for all experts, or one per expert.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bias: Vec<f32>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Set one expert's selection bias (`-inf` disables it).
    SetBias {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        expert: String,
        #[arg(long, allow_hyphen_values = true)]
        bias: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove an expert from a merged model.
    OptOut {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        expert: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune router rows on proxy sets selected from public data.
    TuneRouter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = PUBLIC_DOMAIN)]
        public_domain: String,
        /// `expert=domain` pairs naming each expert's closed corpus.
        #[arg(long, value_delimiter = ',', required = true)]
        proxy: Vec<String>,
        /// Proxy documents per expert; defaults to the largest allowed.
        #[arg(long)]
        cap: Option<usize>,
        /// Documents per class for the proxy classifier.
        #[arg(long, default_value_t = 512)]
        sample: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out perplexity with optional routing, sweep and opt-out sections.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        set: EvalSet,
        #[arg(long)]
        routing_tokens: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        opt_out: Vec<String>,
        /// Output path stem; `.json` and `.csv` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer expert selection fractions per domain.
    RouteDump {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        set: EvalSet,
        #[arg(long, default_value_t = 10_000)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity for several numbers of active experts.
    SweepK {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        set: EvalSet,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prefix-prompted training-data extraction.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: SplitKind,
        #[arg(long, default_value_t = 256)]
        n_docs: usize,
        #[arg(long, default_value_t = 32)]
        prefix_len: usize,
        #[arg(long, default_value_t = 256)]
        continuation_len: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison methods.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Jointly train an upcycled MoE on every corpus under a FLOP budget.
    ReferenceMoe {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<String>,
        /// Experts per layer, the public copy included.
        #[arg(long, default_value_t = 4)]
        experts: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        /// Explicit FLOP budget.
        #[arg(long, conflicts_with = "match_bundles")]
        flops: Option<u64>,
        /// Budget = multiplier x the training FLOPs recorded in these bundles.
        #[arg(long, value_delimiter = ',')]
        match_bundles: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        multiplier: f64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Parameter averaging of dense models.
    Soup {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        /// Weight each document's soup by the models' prefix likelihoods.
        #[arg(long)]
        weighted: bool,
        #[arg(long, default_value_t = 32)]
        prefix_len: usize,
        #[command(flatten)]
        set: EvalSet,
        /// Also write the uniform soup as a checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Logit ensembling weighted by prefix likelihood.
    Btm {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 32)]
        prefix_len: usize,
        #[command(flatten)]
        set: EvalSet,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upcycle dense models into a MoE and train it on public data.
    Btx {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = PUBLIC_DOMAIN)]
        public_domain: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Route each document to one dense model with a domain classifier.
    Route {
        #[arg(long)]
        anchor: PathBuf,
        /// One model per domain, in the order of `--domains`.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        set: EvalSet,
        /// Training documents per domain for the classifier.
        #[arg(long, default_value_t = 256)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<SplitKind, String> {
    match s {
        "train" => Ok(SplitKind::Train),
        "validation" => Ok(SplitKind::Validation),
        "heldout" => Ok(SplitKind::Heldout),
        _ => Err(format!("unknown split {s:?} (train, validation, heldout)")),
    }
}

/// `FLEXMERGE_SEED` if set, else the flag, else `default`.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(default)),
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.train_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $field:ident),*) => { $(if let Some(v) = self.$f { cfg.$field = v; })* };
        }
        set!(steps => steps, batch_size => batch_size, seq_len => seq_len, lr => base_lr, warmup => warmup_steps, weight_decay => weight_decay, load_balance => load_balance_weight);
        cfg.seed = resolve_seed(self.seed, cfg.seed)?;
        Ok(cfg)
    }
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            hidden_dim: self.hidden,
            n_heads: self.heads,
            ffn_dim: self.ffn,
            max_seq_len: self.max_seq,
            ..ModelConfig::default()
        }
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| OsString::from("run"));
    name.push(suffix);
    out.with_file_name(name)
}

/// Writes `<out>.run.json` with the command, its arguments and the
/// resolved settings.
fn write_sidecar(out: &Path, command: &str, resolved: Value) -> Result<()> {
    let path = sibling(out, ".run.json");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))
}

fn corpus(dir: &Path, domain: &str) -> Result<DomainCorpus> {
    import_corpus(dir, domain)
}

fn eval_docs(set: &EvalSet) -> Result<Vec<(String, Vec<Vec<u8>>)>> {
    set.domains
        .iter()
        .map(|d| {
            let mut docs = corpus(&set.corpus_dir, d)?.docs(set.split);
            if let Some(n) = set.max_docs {
                docs.truncate(n);
            }
            Ok((d.clone(), docs))
        })
        .collect()
}

fn model_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load(path: &Path) -> Result<(Transformer, CheckpointManifest)> {
    log::info!("loading {}", path.display());
    load_model(path)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Transformer>> {
    paths.iter().map(|p| Ok(load(p)?.0)).collect()
}

fn meta(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn report_for(model_path: &Path, manifest: &CheckpointManifest) -> EvalReport {
    EvalReport::new(model_id(model_path), manifest.fingerprint.clone())
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { domains, n_docs, short, seed, out } => {
            let seed = resolve_seed(seed, 0)?;
            let opts = if short { CorpusOptions::short() } else { CorpusOptions::default() };
            let mut hashes = BTreeMap::new();
            for d in &domains {
                let c = make_corpus_with(d, seed, n_docs, &opts)?;
                let m = export_corpus(&c, &out)?;
                hashes.insert(d.clone(), m.sha256);
            }
            write_sidecar(&out, "gen-corpus", json!({"domains": domains, "n_docs": n_docs, "options": opts, "seed": seed, "sha256": hashes}))
        }
        Command::PretrainPublic {
            corpus_dir,
            domain,
            model,
            train,
            init_seed,
            out,
        } => {
            let cfg = train.resolve()?;
            let init_seed = resolve_seed(Some(init_seed), init_seed)?;
            let c = corpus(&corpus_dir, &domain)?;
            let (anchor, log) = pretrain_anchor(model.config(), &c.docs(SplitKind::Train), &embedding_sample(&c), &cfg, init_seed)?;
            let m = save_model(&anchor, &out, ArtifactKind::Anchor, meta(&[("final_loss", json!(log.final_loss())), ("flops", json!(log.flops))]))?;
            write_sidecar(
                &out,
                "pretrain-public",
                json!({"model": anchor.config, "train": cfg, "init_seed": init_seed, "corpus": {"domain": domain, "sha256": c.sha256()}, "fingerprint": m.fingerprint, "final_loss": log.final_loss()}),
            )
        }
        Command::TrainExpert {
            anchor,
            corpus_dir,
            domain,
            expert_id,
            train,
            out,
        } => {
            let cfg = train.resolve()?;
            let (a, _) = load(&anchor)?;
            let c = corpus(&corpus_dir, &domain)?;
            let r = init_router_embedding(&a, &embedding_sample(&c))?;
            let mut branch = init_branch(&a, &expert_id, r)?;
            let (bundle, log) = train_expert(&mut branch, &c, &cfg)?;
            bundle.save(&out)?;
            write_sidecar(
                &out,
                "train-expert",
                json!({"train": cfg, "expert_id": expert_id, "anchor_fingerprint": bundle.anchor_fingerprint, "corpus": {"domain": domain, "sha256": c.sha256()}, "final_loss": log.final_loss(), "flops": log.flops}),
            )
        }
        Command::DenseBranch {
            anchor,
            corpus_dir,
            domain,
            train,
            out,
        } => {
            let cfg = train.resolve()?;
            let (a, _) = load(&anchor)?;
            let c = corpus(&corpus_dir, &domain)?;
            let (m, log) = dense_branch(&a, &c.docs(SplitKind::Train), &cfg)?;
            save_model(&m, &out, ArtifactKind::Dense, meta(&[("corpus_id", json!(domain)), ("flops", json!(log.flops))]))?;
            write_sidecar(&out, "dense-branch", json!({"train": cfg, "corpus": {"domain": domain, "sha256": c.sha256()}, "final_loss": log.final_loss(), "flops": log.flops}))
        }
        Command::Merge {
            anchor,
            experts,
            bias,
            top_k,
            out,
        } => {
            let (a, _) = load(&anchor)?;
            let bundles: Vec<ExpertBundle> = experts.iter().map(|p| ExpertBundle::load(p)).collect::<Result<_>>()?;
            let biases: Option<Vec<f32>> = match bias.len() {
                0 => None,
                1 => Some(vec![bias[0]; bundles.len()]),
                n if n == bundles.len() => Some(bias.clone()),
                n => return Err(Error::Input(format!("{n} biases for {} experts", bundles.len()))),
            };
            let m = assemble(&a, &bundles, biases.as_deref(), top_k)?;
            save_model(&m, &out, ArtifactKind::Merged, BTreeMap::new())?;
            write_sidecar(&out, "merge", json!({"roster": m.roster, "biases": m.blocks[0].moe.biases, "top_k": m.config.top_k}))
        }
        Command::SetBias { model, expert, bias, out } => {
            let (m, _) = load(&model)?;
            let m = set_bias(&m, &expert, bias)?;
            save_model(&m, &out, ArtifactKind::Merged, BTreeMap::new())?;
            write_sidecar(&out, "set-bias", json!({"expert": expert, "bias": bias.to_string()}))
        }
        Command::OptOut { model, expert, out } => {
            let (m, _) = load(&model)?;
            let m = opt_out(&m, &expert)?;
            save_model(&m, &out, ArtifactKind::Merged, BTreeMap::new())?;
            write_sidecar(&out, "opt-out", json!({"removed": expert, "roster": m.roster, "top_k": m.config.top_k}))
        }
        Command::TuneRouter {
            model,
            corpus_dir,
            public_domain,
            proxy,
            cap,
            sample,
            train,
            out,
        } => {
            let cfg = train.resolve()?;
            let (m, _) = load(&model)?;
            let anchor = dense_anchor(&m);
            let public = corpus(&corpus_dir, &public_domain)?.docs(SplitKind::Train);
            let mut sets = Vec::new();
            let mut info = Vec::new();
            for pair in &proxy {
                let (expert, domain) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Input(format!("proxy entry {pair:?} must be expert=domain")))?;
                if m.expert_index(expert).is_none() {
                    return Err(Error::Input(format!("expert {expert} is not in the model")));
                }
                let closed = corpus(&corpus_dir, domain)?;
                let closed_train = closed.docs(SplitKind::Train);
                let n = sample.min(closed_train.len()).min(public.len());
                let scorer = train_proxy_classifier(
                    &anchor,
                    expert,
                    &closed_train[..n],
                    &public[..n],
                    closed.len(),
                    &ClassifierConfig {
                        seed: cfg.seed,
                        ..ClassifierConfig::default()
                    },
                )?;
                let (set, _) = select_proxy(&scorer, &anchor, &public, cap.unwrap_or_else(|| scorer.max_cap()))?;
                info.push(json!({"expert": expert, "domain": domain, "validation_accuracy": scorer.validation_accuracy(), "doc_indices": set.doc_indices, "scores": set.scores}));
                sets.push(set);
            }
            let (tuned, log) = tune_router(&m, &sets, &public, &cfg)?;
            save_model(&tuned, &out, ArtifactKind::Merged, BTreeMap::new())?;
            write_sidecar(&out, "tune-router", json!({"train": cfg, "sample": sample, "proxy": info, "final_loss": log.final_loss(), "flops": log.flops}))
        }
        Command::Eval {
            model,
            set,
            routing_tokens,
            sweep,
            opt_out: removed,
            out,
        } => {
            let (m, manifest) = load(&model)?;
            let docs = eval_docs(&set)?;
            let mut r = report_for(&model, &manifest);
            r.perplexity = perplexities(&m, &docs)?;
            if let Some(n) = routing_tokens {
                r.routing = Some(routing_profile(&m, &docs, n)?);
            }
            if !sweep.is_empty() {
                r.sweep = active_expert_sweep(&m, &docs, &sweep)?;
            }
            for e in &removed {
                r.opt_out.push(opt_out_delta(&m, e, &docs)?);
            }
            r.write(&out)?;
            write_sidecar(&out, "eval", json!({"set": set, "routing_tokens": routing_tokens, "sweep": sweep, "opt_out": removed, "content_hash": r.content_hash()}))
        }
        Command::RouteDump { model, set, tokens, out } => {
            let (m, manifest) = load(&model)?;
            let mut r = report_for(&model, &manifest);
            r.routing = Some(routing_profile(&m, &eval_docs(&set)?, tokens)?);
            r.write(&out)?;
            write_sidecar(&out, "route-dump", json!({"set": set, "tokens": tokens, "content_hash": r.content_hash()}))
        }
        Command::SweepK { model, set, ks, out } => {
            let (m, manifest) = load(&model)?;
            let mut r = report_for(&model, &manifest);
            r.sweep = active_expert_sweep(&m, &eval_docs(&set)?, &ks)?;
            r.write(&out)?;
            write_sidecar(&out, "sweep-k", json!({"set": set, "ks": ks, "content_hash": r.content_hash()}))
        }
        Command::Extract {
            model,
            corpus_dir,
            domain,
            split,
            n_docs,
            prefix_len,
            continuation_len,
            samples,
            threshold,
            seed,
            out,
        } => {
            let (m, manifest) = load(&model)?;
            let mut docs = corpus(&corpus_dir, &domain)?.docs(split);
            docs.truncate(n_docs);
            let params = ExtractionParams {
                prefix_len,
                continuation_len,
                samples_per_prefix: samples,
                threshold,
                seed: resolve_seed(seed, 0)?,
                ..ExtractionParams::default()
            };
            let x = extraction_attack(&m, &docs, &params)?;
            let mut r = report_for(&model, &manifest);
            r.seeds.insert("extraction".into(), params.seed);
            let per_doc = x.to_csv()?;
            r.extraction = Some(x);
            r.write(&out)?;
            let docs_csv = sibling(&out, ".docs.csv");
            std::fs::write(&docs_csv, per_doc).map_err(|e| Error::io(&docs_csv, e))?;
            write_sidecar(&out, "extract", json!({"domain": domain, "split": split, "n_docs": n_docs, "params": params, "content_hash": r.content_hash()}))
        }
        Command::Baseline(b) => run_baseline(b),
        Command::ReferenceMoe {
            anchor,
            corpus_dir,
            domains,
            experts,
            top_k,
            flops,
            match_bundles,
            multiplier,
            train,
            init_seed,
            out,
        } => {
            let cfg = train.resolve()?;
            let budget = match flops {
                Some(f) => f,
                None if !match_bundles.is_empty() => {
                    let spent: u64 = match_bundles.iter().map(|p| Ok(ExpertBundle::load(p)?.metadata.flops)).sum::<Result<u64>>()?;
                    (spent as f64 * multiplier).round() as u64
                }
                None => return Err(Error::Config("reference-moe needs --flops or --match-bundles".into())),
            };
            let (a, _) = load(&anchor)?;
            let corpora: Vec<Vec<Vec<u8>>> = domains.iter().map(|d| Ok(corpus(&corpus_dir, d)?.docs(SplitKind::Train))).collect::<Result<_>>()?;
            let rc = ReferenceMoeConfig {
                n_experts: experts,
                top_k,
                flops_budget: budget,
                train: cfg,
                init_seed,
            };
            let (m, log) = unrestricted_moe_train(&a, corpora.iter().map(|c| c.as_slice()).collect(), &rc)?;
            save_model(&m, &out, ArtifactKind::Merged, meta(&[("flops", json!(log.flops))]))?;
            write_sidecar(&out, "reference-moe", json!({"config": rc, "domains": domains, "steps": log.losses.len(), "flops": log.flops, "final_loss": log.final_loss()}))
        }
    }
}

fn run_baseline(cmd: BaselineCommand) -> Result<()> {
    match cmd {
        BaselineCommand::Soup {
            models,
            weighted,
            prefix_len,
            set,
            save,
            out,
        } => {
            let ms = load_all(&models)?;
            let refs: Vec<&Transformer> = ms.iter().collect();
            let docs = eval_docs(&set)?;
            let avg = soup_average(&refs)?;
            let mut r = EvalReport::new(if weighted { "soup-weighted" } else { "soup-average" }, crate::clihub::model_fingerprint(&avg));
            for (d, ds) in &docs {
                let p = if weighted {
                    soup_weighted_perplexity(&refs, ds, prefix_len)?
                } else {
                    crate::evalx::perplexity(&avg, ds)?
                };
                r.perplexity.insert(d.clone(), p);
            }
            if let Some(p) = &save {
                save_model(&avg, p, ArtifactKind::Dense, BTreeMap::new())?;
            }
            r.write(&out)?;
            write_sidecar(&out, "baseline soup", json!({"models": models, "weighted": weighted, "prefix_len": prefix_len, "set": set, "content_hash": r.content_hash()}))
        }
        BaselineCommand::Btm {
            models,
            tau,
            k,
            prefix_len,
            set,
            out,
        } => {
            let ms = load_all(&models)?;
            let refs: Vec<&Transformer> = ms.iter().collect();
            let k = k.unwrap_or(refs.len());
            let mut r = EvalReport::new("btm", String::new());
            for (d, ds) in &eval_docs(&set)? {
                r.perplexity.insert(d.clone(), btm_perplexity(&refs, ds, tau, k, prefix_len)?);
            }
            r.write(&out)?;
            write_sidecar(&out, "baseline btm", json!({"models": models, "tau": tau, "k": k, "prefix_len": prefix_len, "set": set, "content_hash": r.content_hash()}))
        }
        BaselineCommand::Btx {
            anchor,
            models,
            ids,
            top_k,
            corpus_dir,
            public_domain,
            train,
            init_seed,
            out,
        } => {
            let cfg = train.resolve()?;
            let (a, _) = load(&anchor)?;
            let ms = load_all(&models)?;
            let ids: Vec<String> = if ids.is_empty() { (1..=ms.len()).map(|i| format!("e{i}")).collect() } else { ids };
            if ids.len() != ms.len() {
                return Err(Error::Input(format!("{} ids for {} models", ids.len(), ms.len())));
            }
            let experts: Vec<(String, Transformer)> = ids.into_iter().zip(ms).collect();
            let m = btx_assemble(&a, &experts, top_k, init_seed)?;
            let public = corpus(&corpus_dir, &public_domain)?.docs(SplitKind::Train);
            let (m, log) = btx_train(&m, &public, &cfg)?;
            save_model(&m, &out, ArtifactKind::Merged, meta(&[("flops", json!(log.flops))]))?;
            write_sidecar(&out, "baseline btx", json!({"models": models, "roster": m.roster, "train": cfg, "init_seed": init_seed, "final_loss": log.final_loss()}))
        }
        BaselineCommand::Route {
            anchor,
            models,
            set,
            sample,
            out,
        } => {
            if models.len() != set.domains.len() {
                return Err(Error::Input(format!("{} models for {} domains", models.len(), set.domains.len())));
            }
            let (a, _) = load(&anchor)?;
            let ms = load_all(&models)?;
            let refs: Vec<&Transformer> = ms.iter().collect();
            let train_docs: Vec<(String, Vec<Vec<u8>>)> = set
                .domains
                .iter()
                .map(|d| {
                    let mut docs = corpus(&set.corpus_dir, d)?.docs(SplitKind::Train);
                    docs.truncate(sample);
                    Ok((d.clone(), docs))
                })
                .collect::<Result<_>>()?;
            let router = DomainRouter::train(&a, &train_docs, &ClassifierConfig::default())?;
            let docs = eval_docs(&set)?;
            let mut r = EvalReport::new("classifier-route", String::new());
            for (d, ds) in &docs {
                r.perplexity.insert(d.clone(), classifier_route_perplexity(&router, &a, &refs, ds)?.0);
            }
            r.extra.insert("router_accuracy".into(), json!(router.accuracy(&a, &docs)?));
            r.write(&out)?;
            write_sidecar(&out, "baseline route", json!({"models": models, "set": set, "sample": sample, "content_hash": r.content_hash()}))
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 2 for usage errors, 3 for invariant
/// violations and 1 for anything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
