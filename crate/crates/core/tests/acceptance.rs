//! Acceptance criteria 1 to 11. Prints one line per criterion and exits
//! non-zero if any of them fails.
//!
//! `FLEXMERGE_ACCEPTANCE_SCALE=desk` runs the pipeline criteria at the
//! default model size instead of the scaled one.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck::{random_case, TOLERANCE};
use common::pipeline::{Pipeline, Scale, CLOSED, EXPERT_IDS, UNSEEN};
use flexmerge::baselines::{btm_generate, btm_weights, soup_average, soup_weighted, soup_weights, soup_with_weights};
use flexmerge::branch::ExpertBundle;
use flexmerge::clihub::{load_model, save_model, ArtifactKind};
use flexmerge::corpora::{make_corpus_with, CorpusOptions, SplitKind};
use flexmerge::evalx::{extraction_attack, opt_out_delta, perplexities, routing_profile, EvalReport, ExtractionParams};
use flexmerge::lmcore::forward::{logits, logits_and_traces, RoutingTrace};
use flexmerge::lmcore::generate::{generate, SamplingParams};
use flexmerge::lmcore::model::Transformer;
use flexmerge::lmcore::tokenizer::{encode, BOS};
use flexmerge::lmcore::train::{train, TrainConfig};
use flexmerge::merge::{assemble, dense_anchor, opt_in, opt_out, select_proxy, set_bias, train_proxy_classifier, tune_router, ClassifierConfig, MergedModel};
use flexmerge::numcore::tensor::Role;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Concatenated encodings of `docs`, cut into `n_rows` windows of `seq`.
fn token_batch(docs: &[Vec<u8>], n_rows: usize, seq: usize) -> Vec<u32> {
    let mut all: Vec<u32> = docs.iter().flat_map(|d| encode(d)).collect();
    while all.len() < n_rows * seq {
        all.extend_from_within(..);
    }
    all.truncate(n_rows * seq);
    all
}

fn criterion_1() -> Check {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let case = random_case(i);
        let err = case.max_rel_error();
        ensure(err <= TOLERANCE, || format!("case {i} ({}) rel error {err:e}", case.name))?;
        worst = worst.max(err);
    }
    Ok(format!("100 random graphs, worst relative error {worst:.1e} (limit {TOLERANCE:.0e})"))
}

fn criterion_2(p: &Pipeline) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = 125;
    let tokens: Vec<u32> = (0..1000).map(|_| rng.random_range(0..256)).collect();
    let mut worst = 0.0f32;
    for (branch, bundle) in p.branches.iter().zip(&p.bundles) {
        let merged = assemble(&p.anchor, std::slice::from_ref(bundle), Some(&[0.0]), Some(2)).map_err(|e| e.to_string())?;
        let a = logits(&merged, &tokens, tokens.len() / seq, seq).map_err(|e| e.to_string())?;
        let b = logits(&branch.model, &tokens, tokens.len() / seq, seq).map_err(|e| e.to_string())?;
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        ensure(d <= 1e-5, || format!("expert {} differs by {d:e}", bundle.expert_id))?;
        worst = worst.max(d);
    }
    Ok(format!("{} experts on 1000 random tokens, max |logit diff| {worst:.1e}", p.bundles.len()))
}

fn frozen_drift(before: &Transformer, after: &Transformer, skip: impl Fn(&str, Role) -> bool) -> Vec<String> {
    before
        .tensors()
        .into_iter()
        .filter(|t| !skip(&t.name, t.role))
        .filter(|t| after.tensor(&t.name).is_none_or(|u| u.content_hash() != t.content_hash()))
        .map(|t| t.name.clone())
        .collect()
}

fn criterion_3(p: &Pipeline) -> Check {
    let mut checked = 0;
    for b in &p.branches {
        let drift = frozen_drift(&p.anchor, &b.model, |_, _| false);
        ensure(drift.is_empty(), || format!("branch {} changed anchor tensors {drift:?}", b.expert_id))?;
        checked += p.anchor.tensors().len();
    }
    let anchor = dense_anchor(&p.merged);
    let public = p.public.docs(SplitKind::Train);
    let mut sets = Vec::new();
    for (id, corpus) in EXPERT_IDS.iter().zip(&p.closed) {
        let closed = corpus.docs(SplitKind::Train);
        let n = 256.min(closed.len()).min(public.len());
        let scorer = train_proxy_classifier(&anchor, id, &closed[..n], &public[..n], corpus.len(), &ClassifierConfig::default()).map_err(|e| e.to_string())?;
        sets.push(select_proxy(&scorer, &anchor, &public, scorer.max_cap()).map_err(|e| e.to_string())?.0);
    }
    let cfg = TrainConfig { steps: 40, warmup_steps: 5, ..p.scale.expert };
    let (tuned, _) = tune_router(&p.merged, &sets, &public, &cfg).map_err(|e| e.to_string())?;
    let drift = frozen_drift(&p.merged, &tuned, |_, role| role == Role::RouterRow);
    ensure(drift.is_empty(), || format!("router tuning changed {drift:?}"))?;
    let moved = p.merged.tensors().iter().zip(tuned.tensors()).filter(|(a, b)| a.role == Role::RouterRow && !a.bits_eq(b)).count();
    ensure(moved > 0, || "router tuning moved no router row".into())?;
    let frozen = p.merged.tensors().iter().filter(|t| t.role != Role::RouterRow).count();
    Ok(format!("{checked} anchor tensors across 3 branches and {frozen} frozen tensors after router tuning hash-identical; {moved} router rows moved"))
}

fn criterion_4(p: &Pipeline) -> Check {
    let domains = p.heldout();
    let anchor = perplexities(&p.anchor, &domains).map_err(|e| e.to_string())?;
    let merged = perplexities(&p.merged, &domains).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for ((b, bundle), domain) in p.branches.iter().zip(&p.bundles).zip(CLOSED) {
        let home = [(domain.to_string(), domains.iter().find(|(d, _)| d == domain).unwrap().1.clone())];
        let e = perplexities(&b.model, &home).map_err(|e| e.to_string())?[domain];
        ensure(e < anchor[domain], || format!("expert {} home ppl {e:.3} is not below anchor {:.3}", bundle.expert_id, anchor[domain]))?;
        parts.push(format!("{domain} {:.2}->{e:.2}", anchor[domain]));
    }
    let (ma, mm) = (mean(anchor.values().copied()), mean(merged.values().copied()));
    ensure(mm < ma, || format!("merged mean ppl {mm:.3} is not below anchor {ma:.3}"))?;
    Ok(format!(
        "experts beat anchor at home ({}); mean held-out ppl anchor {ma:.2} vs merged {mm:.2} ({:.1}% lower); pipeline {:.0} s",
        parts.join(", "),
        100.0 * (1.0 - mm / ma),
        p.seconds
    ))
}

fn criterion_5(p: &Pipeline) -> Check {
    let domains = p.heldout();
    let mut parts = Vec::new();
    for (i, (id, home)) in EXPERT_IDS.iter().zip(CLOSED).enumerate() {
        let d = opt_out_delta(&p.merged, id, &domains).map_err(|e| e.to_string())?;
        let h = d.relative_change[home];
        ensure(d.after[home] > d.before[home], || format!("removing {id} did not raise {home} ppl"))?;
        for (dom, &c) in &d.relative_change {
            if dom != home {
                ensure(c < h, || format!("removing {id}: {dom} changed {c:+.4} vs home {h:+.4}"))?;
            }
        }
        let worst_other = d.relative_change.iter().filter(|(k, _)| *k != home).map(|(_, &c)| c).fold(f64::NEG_INFINITY, f64::max);
        parts.push(format!("{id} home {:+.1}% others <= {:+.1}%", 100.0 * h, 100.0 * worst_other));
        let removed = opt_out(&p.merged, id).map_err(|e| e.to_string())?;
        let mut back = opt_in(&removed, &p.bundles[i], Some(i + 1), p.merged.blocks[0].moe.biases[i + 1]).map_err(|e| e.to_string())?;
        back.set_top_k(p.merged.config.top_k).map_err(|e| e.to_string())?;
        ensure(back == p.merged, || format!("re-adding {id} did not restore the model"))?;
        ensure(back.tensors().iter().zip(p.merged.tensors()).all(|(a, b)| a.bits_eq(b)), || format!("re-adding {id} is not bit-exact"))?;
    }
    Ok(format!("{}; re-adding restores bit-exactly", parts.join("; ")))
}

fn selections(traces: &[RoutingTrace], expert: usize) -> usize {
    traces.iter().map(|t| t.count(expert)).sum()
}

fn without_column(trace: &RoutingTrace, col: usize) -> Vec<bool> {
    trace.selected.chunks(trace.n_experts).flat_map(|row| row.iter().enumerate().filter(|(j, _)| *j != col).map(|(_, &s)| s)).collect()
}

fn criterion_6(p: &Pipeline) -> Check {
    let base = set_top_k(&p.merged, 2)?;
    let seq = 125;
    let mut parts = Vec::new();
    for (i, (id, home)) in EXPERT_IDS.iter().zip(CLOSED).enumerate() {
        let docs = p.closed[i].docs(SplitKind::Heldout);
        let tokens = token_batch(&docs, 80, seq);
        ensure(tokens.len() == 10_000 && home == p.closed[i].domain_id, || "batch construction".into())?;
        let mut counts = Vec::new();
        for b in [0.0, -0.5, -1.0, -2.0, f32::NEG_INFINITY] {
            let m = set_bias(&base, id, b).map_err(|e| e.to_string())?;
            let (_, traces) = logits_and_traces(&m, &tokens, 80, seq).map_err(|e| e.to_string())?;
            counts.push(selections(&traces, i + 1));
            if b == f32::NEG_INFINITY {
                let (l_inf, t_inf) = logits_and_traces(&m, &tokens, 80, seq).map_err(|e| e.to_string())?;
                let out = opt_out(&m, id).map_err(|e| e.to_string())?;
                let (l_out, t_out) = logits_and_traces(&out, &tokens, 80, seq).map_err(|e| e.to_string())?;
                ensure(t_inf.iter().zip(&t_out).all(|(a, b)| without_column(a, i + 1) == b.selected), || format!("{id}: -inf routing differs from opt-out"))?;
                ensure(l_inf.iter().zip(&l_out).all(|(a, b)| a.to_bits() == b.to_bits()), || format!("{id}: -inf logits differ from opt-out"))?;
            }
        }
        ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("{id}: counts {counts:?} increase"))?;
        ensure(*counts.last().unwrap() == 0, || format!("{id}: selected at -inf"))?;
        ensure(counts[0] > 0, || format!("{id}: never selected at bias 0"))?;
        parts.push(format!("{id} {counts:?}"));
    }
    Ok(format!("selections at b = 0, -0.5, -1, -2, -inf (top-2, 10000 tokens): {}; -inf routes like opt-out", parts.join(", ")))
}

fn set_top_k(m: &MergedModel, k: usize) -> Result<MergedModel, String> {
    let mut m = m.clone();
    m.set_top_k(k).map_err(|e| e.to_string())?;
    Ok(m)
}

fn criterion_7(p: &Pipeline) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
        let w = btm_weights(&losses, rng.random_range(0.05..5.0), rng.random_range(1..=n)).map_err(|e| e.to_string())?;
        let s: f64 = w.weights.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9, || format!("weights sum to {s}"))?;
    }
    let sharp = btm_weights(&[2.0, 1.0, 3.0], 1e-6, 3).map_err(|e| e.to_string())?;
    ensure(sharp.weights == [0.0, 1.0, 0.0], || format!("tau 1e-6 gave {:?}", sharp.weights))?;
    let w = btm_weights(&[1.0, 2.0, 3.0], 1.0, 2).map_err(|e| e.to_string())?.weights;
    ensure((w[0] - 0.7311).abs() <= 1e-4 && (w[1] - 0.2689).abs() <= 1e-4 && w[2] == 0.0, || format!("[1,2,3] gave {w:?}"))?;
    let prompt: Vec<u32> = std::iter::once(BOS).chain(b"It was a calm day and".iter().map(|&b| b as u32)).collect();
    let g = SamplingParams::greedy(48);
    let solo = generate(&p.anchor, &prompt, &g).map_err(|e| e.to_string())?;
    let (ens, _) = btm_generate(&[&p.anchor], &prompt, 1.0, 1, &g).map_err(|e| e.to_string())?;
    ensure(ens == solo, || "single-model ensemble diverged from greedy output".into())?;
    Ok(format!(
        "200 random weight vectors sum to 1; tau=1e-6 one-hot; [1,2,3] tau=1 k=2 -> [{:.4}, {:.4}, 0]; 1-model ensemble matches {}-token greedy output",
        w[0],
        w[1],
        solo.len()
    ))
}

fn criterion_8(p: &Pipeline) -> Check {
    let mut worst = 0.0f32;
    for n in [2, 3, 5] {
        let copies: Vec<&Transformer> = std::iter::repeat_n(&p.anchor, n).collect();
        let s = soup_average(&copies).map_err(|e| e.to_string())?;
        for (a, b) in s.tensors().into_iter().zip(p.anchor.tensors()) {
            worst = worst.max(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max));
        }
    }
    ensure(worst <= 1e-7, || format!("copy soup differs by {worst:e}"))?;
    let inits: Vec<Transformer> = (11..14).map(|s| Transformer::init(p.scale.model, s).unwrap()).collect();
    let models: Vec<&Transformer> = std::iter::once(&p.anchor).chain(&inits).collect();
    let w = soup_weights(&[2.5; 4]).map_err(|e| e.to_string())?;
    let weighted = soup_with_weights(&models, &w).map_err(|e| e.to_string())?;
    let avg = soup_average(&models).map_err(|e| e.to_string())?;
    let d = weighted
        .tensors()
        .into_iter()
        .zip(avg.tensors())
        .map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
        .fold(0.0f32, f32::max);
    ensure(d <= 1e-7, || format!("equal-loss soup differs from average by {d:e}"))?;
    let same: Vec<&Transformer> = vec![&p.anchor; 3];
    let tokens = encode(b"The gardener visited the market.");
    let (s, sw) = soup_weighted(&same, &tokens).map_err(|e| e.to_string())?;
    ensure(sw.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12), || format!("weights {sw:?}"))?;
    let d2 = s.tensors().into_iter().zip(p.anchor.tensors()).map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)).fold(0.0f32, f32::max);
    ensure(d2 <= 1e-7, || format!("likelihood-weighted soup of copies differs by {d2:e}"))?;
    Ok(format!("N-copy soups within {worst:.1e}; equal-loss weighted soup vs average {d:.1e}"))
}

fn criterion_9(p: &Pipeline) -> Check {
    let opts = CorpusOptions::short();
    let small = make_corpus_with("news_templates", 99, 64, &opts).map_err(|e| e.to_string())?.documents;
    let cfg = p.scale.model;
    let config = flexmerge::lmcore::config::ModelConfig { max_seq_len: 192, ..cfg };
    let mut m = Transformer::init(config, 9).map_err(|e| e.to_string())?;
    m.set_trainable(|t| t.role != Role::RouterRow);
    let batch = 8;
    let epochs = 100;
    let train_cfg = TrainConfig {
        steps: epochs * small.len() / batch,
        batch_size: batch,
        seq_len: 192,
        base_lr: 3e-3,
        warmup_steps: 50,
        seed: 9,
        ..TrainConfig::default()
    };
    train(&mut m, vec![&small], &train_cfg).map_err(|e| e.to_string())?;
    m.freeze_all();
    let params = ExtractionParams::default();
    let over = extraction_attack(&m, &small, &params).map_err(|e| e.to_string())?;
    ensure(over.rate >= 0.5, || format!("overfit model extraction rate {:.3}", over.rate))?;
    let unseen = make_corpus_with(UNSEEN, 5, 64, &opts).map_err(|e| e.to_string())?.documents;
    let ctrl = extraction_attack(&p.anchor, &unseen, &params).map_err(|e| e.to_string())?;
    ensure(ctrl.rate <= 0.02, || format!("anchor extraction rate on {UNSEEN} {:.3}", ctrl.rate))?;
    Ok(format!(
        "overfit model ({} steps = {epochs} epochs of 64 short docs) rate {:.3} >= 0.5; anchor on unseen {UNSEEN} rate {:.3} <= 0.02",
        train_cfg.steps, over.rate, ctrl.rate
    ))
}

/// Writes every artifact of a pipeline run and its report into `dir`;
/// returns the file contents keyed by relative path.
fn artifacts(p: &Pipeline, dir: &std::path::Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    save_model(&p.anchor, &dir.join("anchor"), ArtifactKind::Anchor, BTreeMap::new()).map_err(|e| e.to_string())?;
    for b in &p.bundles {
        b.save(&dir.join(&b.expert_id)).map_err(|e| e.to_string())?;
    }
    save_model(&p.merged, &dir.join("merged"), ArtifactKind::Merged, BTreeMap::new()).map_err(|e| e.to_string())?;
    let domains = p.heldout();
    let mut r = EvalReport::new("merged", flexmerge::clihub::model_fingerprint(&p.merged));
    r.perplexity = perplexities(&p.merged, &domains).map_err(|e| e.to_string())?;
    r.routing = Some(routing_profile(&p.merged, &domains, 2000).map_err(|e| e.to_string())?);
    r.opt_out.push(opt_out_delta(&p.merged, EXPERT_IDS[0], &domains).map_err(|e| e.to_string())?);
    r.timestamp = String::new();
    r.write(&dir.join("report")).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.insert(rel, std::fs::read(&entry).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn criterion_10(p: &Pipeline) -> Check {
    let smoke = p.scale.smoke();
    let (a, b) = (Pipeline::build(smoke.clone()), Pipeline::build(smoke));
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (artifacts(&a, da.path())?, artifacts(&b, db.path())?);
    ensure(fa.keys().eq(fb.keys()), || "reruns wrote different file sets".into())?;
    for (k, v) in &fa {
        ensure(fb[k] == *v, || format!("{k} differs between reruns"))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut round_trips = 0;
    for (name, m) in [("anchor", &p.anchor), ("merged", &p.merged)] {
        save_model(m, &dir.path().join(name), ArtifactKind::Merged, BTreeMap::new()).map_err(|e| e.to_string())?;
        let (back, _) = load_model(&dir.path().join(name)).map_err(|e| e.to_string())?;
        ensure(back == *m && back.tensors().iter().zip(m.tensors()).all(|(x, y)| x.bits_eq(y)), || format!("{name} round trip differs"))?;
        let t = token_batch(&p.public.docs(SplitKind::Heldout), 2, 100);
        let (l1, l2) = (logits(m, &t, 2, 100).unwrap(), logits(&back, &t, 2, 100).unwrap());
        ensure(l1.iter().zip(&l2).all(|(x, y)| x.to_bits() == y.to_bits()), || format!("{name} logits differ after reload"))?;
        round_trips += 1;
    }
    for bundle in &p.bundles {
        let path = dir.path().join(&bundle.expert_id);
        bundle.save(&path).map_err(|e| e.to_string())?;
        ensure(ExpertBundle::load(&path).map_err(|e| e.to_string())? == *bundle, || format!("bundle {} round trip differs", bundle.expert_id))?;
        round_trips += 1;
    }
    Ok(format!("two seeded reruns wrote {} bit-identical files; {round_trips} save/load round trips bit-exact", fa.len()))
}

fn criterion_11(p: &Pipeline) -> Check {
    let m = set_top_k(&p.merged, 2)?;
    let domains: Vec<(String, Vec<Vec<u8>>)> = p.heldout().into_iter().skip(1).collect();
    let profile = routing_profile(&m, &domains, 10_000).map_err(|e| e.to_string())?;
    let layers = m.blocks.len();
    let mut parts = Vec::new();
    for (i, domain) in CLOSED.iter().enumerate() {
        let r = &profile.domains[*domain];
        let wins = (0..layers).filter(|&l| r.top_non_public(l) == Some(i + 1)).count();
        ensure(2 * wins >= layers, || format!("{domain}: matching expert leads in {wins}/{layers} layers"))?;
        parts.push(format!("{domain} {wins}/{layers}"));
    }
    Ok(format!("matching expert has the largest non-public share (top-2): {}", parts.join(", ")))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1} s]");
    result.is_ok()
}

fn main() {
    // Test harness flags such as `--nocapture` are accepted and ignored.
    let scale = match std::env::var("FLEXMERGE_ACCEPTANCE_SCALE").as_deref() {
        Ok("desk") => Scale::desk(),
        _ => Scale::scaled(),
    };
    println!("acceptance suite ({} config)", scale.name);
    let mut ok = run(1, "gradient oracle", criterion_1);
    let t0 = Instant::now();
    let built = catch_unwind(|| Pipeline::build(scale));
    println!("pipeline built in {:.1} s", t0.elapsed().as_secs_f64());
    let criteria: [(u32, &str, fn(&Pipeline) -> Check); 10] = [
        (2, "branch/merge equivalence", criterion_2),
        (3, "freeze contract", criterion_3),
        (4, "directional gain over the anchor", criterion_4),
        (5, "opt-out locality", criterion_5),
        (6, "bias monotonicity", criterion_6),
        (7, "BTM algebra", criterion_7),
        (8, "soup identities", criterion_8),
        (9, "extraction harness", criterion_9),
        (10, "determinism and persistence", criterion_10),
        (11, "routing profile", criterion_11),
    ];
    for (id, name, f) in criteria {
        ok &= match &built {
            Ok(p) => run(id, name, || f(p)),
            Err(_) => run(id, name, || Err("pipeline construction panicked".into())),
        };
    }
    if !ok {
        std::process::exit(1);
    }
}
