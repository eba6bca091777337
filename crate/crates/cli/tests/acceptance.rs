//! Acceptance suite: one line per criterion.
//!
//! Criteria 1-8 always run. The desk-scale experiment (9) and the ablation
//! harness (10) take hours on one core, so they run only when
//! `CTXLM_ACCEPT_DESK=1` / `CTXLM_ACCEPT_ABLATION=1`; otherwise finished
//! sweeps under `target/desk` and `target/ablation` are checked as recorded,
//! and the criterion is reported as SKIP when there is nothing to check.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use contextlm::complexity::{count_params, overhead_report};
use contextlm::inference::{decode_step, generate, generate_full_recompute, prefill, SamplerConfig};
use contextlm::model::{
    build_chunk_layout, forward, grad_pathway_report, logits, CInit, ChunkLayout, ForwardOptions, Mode, ModelConfig,
    ModelParams, TokenBatch,
};
use contextlm::tensor::{Scalar, Tape};
use contextlm::verify::jittered_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome::Pass(detail.into())
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome::Fail(detail.into())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, batch: usize, seq: usize) -> TokenBatch {
    TokenBatch::new((0..batch * seq).map(|_| r.gen_range(0..vocab)).collect(), batch, seq).unwrap()
}

fn random_tiny_contextlm(r: &mut ChaCha8Rng, max_seq_len: usize) -> ModelConfig {
    let heads = [1, 2, 4][r.gen_range(0..3)];
    ModelConfig {
        vocab_size: r.gen_range(4..=24),
        d_model: 8,
        n_heads: heads,
        n_enc_layers: r.gen_range(0..=2),
        n_dec_layers: r.gen_range(1..=2),
        n_ctx_layers: r.gen_range(1..=2),
        chunk_size: r.gen_range(2..=6),
        max_seq_len,
        mode: Mode::ContextLm,
        tie_embeddings: r.gen_bool(0.5),
        c_init: if r.gen_bool(0.5) { CInit::FirstToken } else { CInit::Learned },
        seed: r.gen(),
        ..ModelConfig::default()
    }
}

fn workspace() -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    root.canonicalize().unwrap_or(root)
}

fn ctxlm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlm"))
        .args(args)
        .env_remove("CTXLM_THREADS")
        .output()
        .expect("ctxlm runs")
}

// 1. Segment sizes w−1, w, …, T+1−(K−1)w against an independent slot count.
fn layout_conformance() -> Outcome {
    let mut cases = 0;
    for t in 2..=4096usize {
        for w in 2..=16usize {
            // Independent route: count positions per slot ⌊(t+1)/w⌋.
            let k = t / w + 1;
            let mut counted = vec![0usize; k];
            for pos in 0..t {
                counted[(pos + 1) / w] += 1;
            }
            if w > t {
                // No full window: the checked constructor refuses and the
                // prefix layout keeps every position on the placeholder.
                let prefix = ChunkLayout::with_prefix(t, w);
                if build_chunk_layout(t, w).is_ok() || prefix.num_slots != 1 || prefix.segment_sizes() != [t] {
                    return fail(format!("T={t} w={w}: short-sequence layout wrong"));
                }
                cases += 1;
                continue;
            }
            let layout = match build_chunk_layout(t, w) {
                Ok(l) => l,
                Err(e) => return fail(format!("T={t} w={w}: {e}")),
            };
            let mut formula = vec![w - 1];
            formula.extend(std::iter::repeat(w).take(k - 2));
            formula.push(t + 1 - (k - 1) * w);
            let sizes = layout.segment_sizes();
            if layout.num_slots != k || sizes != formula || counted != formula || sizes.iter().sum::<usize>() != t {
                return fail(format!("T={t} w={w}: sizes {sizes:?}, formula {formula:?}, K {}", layout.num_slots));
            }
            cases += 1;
        }
    }
    pass(format!("{cases} (T, w) pairs exact"))
}

// 2. Perturbing token p leaves every logit before p bit-identical.
fn causality_fuzz() -> Outcome {
    let mut r = rng(2);
    for trial in 0..200u64 {
        let config = random_tiny_contextlm(&mut r, 24);
        let params = jittered_params(&config, trial).unwrap();
        let seq = r.gen_range(2..=24);
        let tokens = random_tokens(&mut r, config.vocab_size, 1, seq);
        let p = r.gen_range(0..seq);
        let mut perturbed = tokens.clone();
        perturbed.ids[p] = (perturbed.ids[p] + r.gen_range(1..config.vocab_size)) % config.vocab_size;
        let a = logits(&params, &tokens).unwrap();
        let b = logits(&params, &perturbed).unwrap();
        let v = config.vocab_size;
        if a.data()[..p * v] != b.data()[..p * v] {
            return fail(format!("trial {trial}: logits before position {p} changed (T={seq}, {config:?})"));
        }
        if a.data()[p * v..(p + 1) * v] == b.data()[p * v..(p + 1) * v] {
            return fail(format!("trial {trial}: perturbation at {p} had no effect"));
        }
    }
    pass("200 trials, prefix logits bit-identical")
}

// 3. Pathway identities, recomputed here from the report's raw gradients.
fn pathway_identities() -> Outcome {
    let mut r = rng(3);
    let mut worst = [0.0f64; 5];
    for trial in 0..6u64 {
        let config = random_tiny_contextlm(&mut r, 16);
        let params = jittered_params(&config, 30 + trial).unwrap();
        let (batch, seq) = (2, r.gen_range(config.chunk_size..=16));
        let inputs = random_tokens(&mut r, config.vocab_size, batch, seq);
        let targets = random_tokens(&mut r, config.vocab_size, batch, seq).ids;
        let rep = grad_pathway_report(&params, &inputs, &targets).unwrap();
        let d = config.d_model;
        let w = config.chunk_size;
        let chunks = seq / w;
        let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

        let split: Vec<f64> = rep.token_pathway.data().iter().zip(rep.context_pathway.data()).map(|(a, b)| a + b).collect();
        worst[0] = worst[0].max(max_diff(rep.full.data(), &split));

        // ∂L/∂ĉₖ against copies at positions with ⌊(t+1)/w⌋ = k.
        let mut agg = vec![0.0; batch * chunks * d];
        for b in 0..batch {
            for t in 0..seq {
                let k = (t + 1) / w;
                if k == 0 {
                    continue;
                }
                for i in 0..d {
                    agg[(b * chunks + k - 1) * d + i] += rep.slot_grads.data()[(b * seq + t) * d + i];
                }
            }
        }
        worst[1] = worst[1].max(max_diff(rep.chunk_grads.data(), &agg));

        let mut summed = vec![0.0; batch * chunks * d];
        for (j, g) in rep.token_loss_grads.iter().enumerate() {
            let (bj, tj) = (j / seq, j % seq);
            for (o, v) in summed.iter_mut().zip(g.data()) {
                *o += v;
            }
            for b in 0..batch {
                for k in 1..=chunks {
                    let first = k * w - 1;
                    if b != bj || tj < first {
                        let row = &g.data()[(b * chunks + k - 1) * d..][..d];
                        worst[3] = worst[3].max(row.iter().map(|x| x.abs()).fold(0.0, f64::max));
                    }
                }
            }
        }
        worst[2] = worst[2].max(max_diff(rep.chunk_grads.data(), &summed));
        worst[4] = worst[4].max(rep.residuals.segment_leakage);
    }
    let detail = format!(
        "split {:.1e}, chunk aggregation {:.1e}, per-token sum {:.1e}, leakage {:.1e}/{:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    if worst.iter().all(|&x| x < 1e-10) {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn loss_f64(params: &ModelParams<f64>, inputs: &TokenBatch, targets: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, inputs, ForwardOptions::default()).unwrap();
    let loss = tape.cross_entropy(trace.logits, targets, None).unwrap();
    tape.value(loss).data()[0]
}

// 4. Every parameter of the d=8, T=8, w=4, 0/2+2 model against a fourth-order
// central difference.
fn full_gradcheck() -> Outcome {
    let config = ModelConfig::tiny();
    assert_eq!((config.d_model, config.chunk_size, config.n_enc_layers, config.n_dec_layers, config.n_ctx_layers), (8, 4, 0, 2, 2));
    let mut r = rng(4);
    let mut params = jittered_params(&config, 4).unwrap();
    let inputs = random_tokens(&mut r, config.vocab_size, 1, 8);
    let targets = random_tokens(&mut r, config.vocab_size, 1, 8).ids;
    let (_, grads) = contextlm::model::loss_and_grads(&params, &inputs, &targets, ForwardOptions::default()).unwrap();
    let h = 1e-3;
    let (mut worst, mut worst_name, mut n) = (0.0f64, String::new(), 0);
    for ti in 0..params.tensors().len() {
        let name = params.names()[ti].clone();
        for i in 0..params.tensors()[ti].numel() {
            let x0 = params.tensors()[ti].data()[i];
            let mut at = |dx: f64| {
                params.tensors_mut()[ti].data_mut()[i] = x0 + dx;
                loss_f64(&params, &inputs, &targets)
            };
            let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            params.tensors_mut()[ti].data_mut()[i] = x0;
            let analytic = grads[ti].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            if !(rel <= worst) {
                worst = rel;
                worst_name = name.clone();
            }
            n += 1;
        }
    }
    let detail = format!("{n} parameters, max relative error {worst:.2e} (worst `{worst_name}`)");
    if worst < 1e-4 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 5. Zeroed fusion reproduces the matched-depth baseline.
fn zero_context_equivalence() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let config = random_tiny_contextlm(&mut r, 16);
        let params = jittered_params(&config, 50 + trial).unwrap();
        let baseline = params.transplant(&ModelConfig { mode: Mode::Baseline, ..config.clone() }).unwrap();
        let seq = r.gen_range(1..=16);
        let tokens = random_tokens(&mut r, config.vocab_size, 2, seq);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let opts = ForwardOptions { zero_fusion: true, ..Default::default() };
        let trace = forward(&mut tape, &params, &bound, &tokens, opts).unwrap();
        let b = logits(&baseline, &tokens).unwrap();
        let err = tape.value(trace.logits).data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let detail = format!("20 configs, max |Δlogit| {worst:.1e}");
    if worst < 1e-12 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn full_last_logits(params: &ModelParams<f32>, ids: &[usize]) -> Vec<f32> {
    let v = params.config().vocab_size;
    let l = logits(params, &TokenBatch::single(ids).unwrap()).unwrap();
    l.data()[(ids.len() - 1) * v..].to_vec()
}

// 6. KV-cached decoding against full recomputation, f32.
fn incremental_inference() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for m in 0..20u64 {
        let config = random_tiny_contextlm(&mut r, 80);
        let params = jittered_params(&config, 60 + m).unwrap().cast::<f32>();
        let len = r.gen_range(1..=8);
        let prompt = random_tokens(&mut r, config.vocab_size, 1, len).ids;
        let cached = generate(&params, &prompt, 64, &SamplerConfig::default()).unwrap();
        let full = generate_full_recompute(&params, &prompt, 64).unwrap();
        if cached != full {
            let at = cached.iter().zip(&full).position(|(a, b)| a != b).unwrap_or(0);
            return fail(format!("model {m}: tokens diverge at position {at}"));
        }
        let mut state = prefill(&params, &prompt).unwrap();
        let mut step_logits = state.logits.clone();
        for t in prompt.len()..=full.len() {
            let reference = full_last_logits(&params, &full[..t]);
            let scale = reference.iter().map(|x| x.as_f64().abs()).fold(1e-6, f64::max);
            let err = step_logits.iter().zip(&reference).map(|(a, b)| (a - b).abs() as f64 / scale).fold(0.0, f64::max);
            worst = worst.max(err);
            if t < full.len() {
                step_logits = decode_step(&mut state, &params, full[t]).unwrap();
            }
        }
    }
    let detail = format!("20 models x 64 tokens identical, max relative logit error {worst:.1e}");
    if worst < 1e-4 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 7. Attention-term overhead 1/w², context memory 1/w, exact parameter counts.
fn complexity_claims() -> Outcome {
    for w in 2..=16usize {
        let seq = 64 * w;
        let config = ModelConfig { chunk_size: w, max_seq_len: seq, ..ModelConfig::default() };
        let o = overhead_report(&config, seq, None).unwrap().cost.overhead;
        if o.attention_term_per_layer != 1.0 / (w * w) as f64 || o.context_memory != 1.0 / w as f64 {
            return fail(format!("w={w}: attention {} memory {}", o.attention_term_per_layer, o.context_memory));
        }
    }
    let desk = overhead_report(&ModelConfig::default(), 256, None).unwrap().cost.overhead;
    if desk.attention_term_per_layer != 0.0625 || desk.context_memory != 0.25 {
        return fail(format!("w=4: {} / {}", desk.attention_term_per_layer, desk.context_memory));
    }
    let mut r = rng(7);
    for i in 0..50 {
        let heads = r.gen_range(1..=4);
        let enc = r.gen_range(0..=2);
        let config = ModelConfig {
            vocab_size: r.gen_range(2..=300),
            d_model: heads * r.gen_range(1..=8),
            n_heads: heads,
            n_enc_layers: enc,
            n_dec_layers: r.gen_range(usize::from(enc == 0)..=3),
            n_ctx_layers: r.gen_range(1..=3),
            chunk_size: r.gen_range(2..=8),
            max_seq_len: r.gen_range(1..=128),
            mode: if r.gen_bool(0.7) { Mode::ContextLm } else { Mode::Baseline },
            tie_embeddings: r.gen_bool(0.5),
            c_init: if r.gen_bool(0.5) { CInit::Learned } else { CInit::FirstToken },
            ..ModelConfig::default()
        };
        let params = ModelParams::<f32>::init(&config).unwrap();
        let bytes: usize = params.tensors().iter().map(|t| std::mem::size_of_val(t.data())).sum();
        if count_params(&config).total * 4 != bytes as u64 {
            return fail(format!("config {i}: counted {} params, instantiated {} bytes", count_params(&config).total, bytes));
        }
    }
    pass(format!(
        "1/w^2 and 1/w exact for w in 2..=16 (6.25% / 25% at w=4); 50 param counts exact; full-model FLOP overhead at desk scale {:.2}%",
        100.0 * desk.full_model
    ))
}

/// Deterministic word salad with some repeated structure.
fn synthetic_corpus(bytes: usize) -> Vec<u8> {
    let words = [
        "the", "model", "reads", "a", "window", "of", "bytes", "and", "predicts", "next", "context", "token", "while",
        "each", "chunk", "is", "pooled", "into", "one", "vector", "that", "guides", "decoder", "layers", "\n",
    ];
    let mut r = rng(8);
    let mut out = Vec::with_capacity(bytes + 16);
    while out.len() < bytes {
        let i = r.gen_range(0..words.len());
        out.extend_from_slice(words[i].as_bytes());
        out.push(if r.gen_bool(0.1) { b'.' } else { b' ' });
    }
    out.truncate(bytes);
    out
}

fn strip_wall(metrics: &str) -> Vec<Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

// 8. Same-seed runs and interrupted/resumed runs through the CLI.
fn determinism_and_resume() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(200_000)).unwrap();
    let config = dir.path().join("config.json");
    let json = serde_json::json!({
        "model": {"d_model": 16, "n_heads": 2, "n_dec_layers": 2, "n_ctx_layers": 2, "max_seq_len": 32, "dropout": 0.1},
        "train": {"steps": 500, "batch_size": 4, "seq_len": 32, "warmup_steps": 20, "log_every": 1,
                  "eval_every": 100, "eval_windows": 8, "checkpoint_every": 100, "seed": 7},
        "data": {"corpus": corpus},
    });
    std::fs::write(&config, json.to_string()).unwrap();
    let cfg = config.to_str().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", cfg, "--out", out.to_str().unwrap(), "--quiet"];
        args.extend_from_slice(extra);
        let o = ctxlm(&args);
        (o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    for (name, extra) in [("a", &[][..]), ("b", &[]), ("c", &["--stop-after", "250"]), ("c", &["--resume", "latest"])] {
        let (ok, err) = run(name, extra);
        if !ok {
            return fail(format!("run {name} {extra:?} failed: {err}"));
        }
    }
    let read = |name: &str, file: &str| std::fs::read(dir.path().join(name).join(file)).unwrap();
    let text = |name: &str| String::from_utf8(read(name, "metrics.jsonl")).unwrap();
    let final_ckpt = "ckpt_000500.bin";
    if read("a", final_ckpt) != read("b", final_ckpt) || strip_wall(&text("a")) != strip_wall(&text("b")) {
        return fail("same-seed runs differ");
    }
    if read("a", final_ckpt) != read("c", final_ckpt) || strip_wall(&text("a")) != strip_wall(&text("c")) {
        return fail("interrupted and resumed run differs from the uninterrupted one");
    }
    let records = strip_wall(&text("a")).len();
    pass(format!("500 steps with dropout: checkpoints byte-identical, {records} metric records identical, resume at 250 bit-exact"))
}

fn env_on(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn sweep_dir(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var).map_or_else(|| workspace().join("target").join(default), PathBuf::from)
}

/// `CTXLM_DESK_CORPUS`, else `corpus.txt` in the desk directory, built from
/// the sorted Python standard library sources when absent.
fn desk_corpus(desk: &Path) -> Result<PathBuf, String> {
    if let Some(p) = std::env::var_os("CTXLM_DESK_CORPUS") {
        return Ok(PathBuf::from(p));
    }
    let path = desk.join("corpus.txt");
    if path.is_file() {
        return Ok(path);
    }
    let mut roots: Vec<PathBuf> = std::fs::read_dir("/usr/lib")
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("python3")) && p.is_dir())
        .collect();
    roots.sort();
    let root = roots.first().ok_or("no corpus: set CTXLM_DESK_CORPUS to a >= 1 MB text file")?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "py"))
        .collect();
    files.sort();
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(std::fs::read(f).map_err(|e| e.to_string())?);
    }
    std::fs::create_dir_all(desk).map_err(|e| e.to_string())?;
    std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
    Ok(path)
}

fn run_sweep(out: &Path, corpus: &Path, axis: &str, values: &str, seeds: &str) -> Result<(), String> {
    let config = workspace().join("configs/desk.json");
    let o = ctxlm(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--data.corpus",
        corpus.to_str().unwrap(),
        "--axis",
        axis,
        "--values",
        values,
        "--seeds",
        seeds,
        "--out",
        out.to_str().unwrap(),
        "--skip-existing",
        "--quiet",
    ]);
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

/// Checks that a recorded run used the desk architecture on a ≥ 1 MB corpus.
fn desk_run_ok(run_dir: &Path) -> Result<(), String> {
    let c = read_json(&run_dir.join("config.resolved.json")).ok_or(format!("{}: no resolved config", run_dir.display()))?;
    let m = &c["model"];
    let t = &c["train"];
    let shape = (m["d_model"].as_u64(), m["n_enc_layers"].as_u64(), m["n_dec_layers"].as_u64(), t["seq_len"].as_u64(), t["steps"].as_u64());
    if shape != (Some(128), Some(0), Some(4), Some(256), Some(3000)) {
        return Err(format!("{}: not the desk configuration", run_dir.display()));
    }
    let corpus = c["data"]["corpus"].as_str().unwrap_or_default();
    let size = std::fs::metadata(corpus).map(|m| m.len()).unwrap_or(0);
    if size < 1 << 20 {
        return Err(format!("{}: corpus {corpus} is {size} bytes, below 1 MB", run_dir.display()));
    }
    Ok(())
}

fn hours(ms: f64) -> f64 {
    ms / 3.6e6
}

// 9. Baseline vs ContextLM at desk scale over three seeds.
fn desk_experiment() -> Outcome {
    let desk = sweep_dir("CTXLM_DESK_DIR", "desk");
    let summary_path = desk.join("reports/ablation_mode.json");
    let source = if env_on("CTXLM_ACCEPT_DESK") {
        let corpus = match desk_corpus(&desk) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        if let Err(e) = run_sweep(&desk, &corpus, "mode", "baseline,contextlm", "0,1,2") {
            return fail(format!("sweep failed: {e}"));
        }
        "ran"
    } else if summary_path.is_file() {
        "recorded"
    } else {
        return Outcome::Skip(format!("set CTXLM_ACCEPT_DESK=1 to run (about 3.5 h on one core); no summary at {}", summary_path.display()));
    };
    let Some(s) = read_json(&summary_path) else {
        return fail(format!("no comparison table at {}", summary_path.display()));
    };
    let runs = s["runs"].as_array().cloned().unwrap_or_default();
    if runs.len() != 6 {
        return fail(format!("{} runs in summary, expected 6", runs.len()));
    }
    for r in &runs {
        if let Err(e) = desk_run_ok(Path::new(r["dir"].as_str().unwrap_or_default())) {
            return fail(e);
        }
    }
    let c = &s["comparison"];
    let deltas: Vec<String> = c["per_seed"]
        .as_array()
        .map(|a| a.iter().map(|d| format!("{:+.4}", d["delta"].as_f64().unwrap_or(f64::NAN))).collect())
        .unwrap_or_default();
    let wall: f64 = runs.iter().filter_map(|r| r["wall_ms"].as_f64()).sum();
    let detail = format!(
        "{source}: delta nll (contextlm - baseline) per seed [{}], contextlm <= baseline in {} of 3 (expected >= 2: {}), total train time {:.2} h (budget 2 h on a desktop CPU: {})",
        deltas.join(", "),
        c["contextlm_wins"].as_u64().unwrap_or(0),
        if c["expected_direction"].as_bool() == Some(true) { "met" } else { "not met" },
        hours(wall),
        if hours(wall) <= 2.0 { "met" } else { "exceeded on this machine" },
    );
    if c["within_margin"].as_bool() == Some(true) && deltas.len() == 3 {
        pass(format!("table emitted, all seeds within +0.05 nats; {detail}"))
    } else {
        fail(format!("a seed exceeds baseline + 0.05 nats; {detail}"))
    }
}

// 10. Chunk-size and predictor-depth sweeps.
fn ablation_harness() -> Outcome {
    let dir = sweep_dir("CTXLM_ABLATION_DIR", "ablation");
    let sweeps = [("chunk_size", "2,4,8,16"), ("ctx_depth", "1,2,4")];
    let source = if env_on("CTXLM_ACCEPT_ABLATION") {
        let corpus = match desk_corpus(&sweep_dir("CTXLM_DESK_DIR", "desk")) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        for (axis, values) in sweeps {
            if let Err(e) = run_sweep(&dir, &corpus, axis, values, "0") {
                return fail(format!("{axis} sweep failed: {e}"));
            }
        }
        "ran"
    } else if sweeps.iter().all(|(a, _)| dir.join(format!("reports/ablation_{a}.json")).is_file()) {
        "recorded"
    } else {
        return Outcome::Skip(format!(
            "set CTXLM_ACCEPT_ABLATION=1 to run (about 4 h on one core); no summaries under {}",
            dir.join("reports").display()
        ));
    };
    let mut parts = Vec::new();
    let mut wall = 0.0;
    for (axis, values) in sweeps {
        let Some(s) = read_json(&dir.join(format!("reports/ablation_{axis}.json"))) else {
            return fail(format!("missing ablation_{axis}.json"));
        };
        let want: Vec<&str> = values.split(',').collect();
        let got: Vec<&str> = s["values"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
        let settings = s["settings"].as_array().cloned().unwrap_or_default();
        if got != want || settings.len() != want.len() {
            return fail(format!("{axis}: summary covers {got:?}, expected {want:?}"));
        }
        for r in s["runs"].as_array().into_iter().flatten() {
            if let Err(e) = desk_run_ok(Path::new(r["dir"].as_str().unwrap_or_default())) {
                return fail(e);
            }
            wall += r["wall_ms"].as_f64().unwrap_or(0.0);
        }
        let nll: Vec<String> = settings
            .iter()
            .map(|g| format!("{}: {:.4}", g["value"].as_str().unwrap_or("?"), g["mean_val_nll"].as_f64().unwrap_or(f64::NAN)))
            .collect();
        if settings.iter().any(|g| !g["mean_val_nll"].as_f64().is_some_and(f64::is_finite)) {
            return fail(format!("{axis}: non-finite validation loss"));
        }
        parts.push(format!("{axis} [{}] trend {}", nll.join(", "), s["trend"].as_str().unwrap_or("?")));
    }
    pass(format!("{source}: {}; {:.2} h total (budget 6 h)", parts.join("; "), hours(wall)))
}

fn main() {
    let criteria: [(&str, Check, Option<Duration>); 10] = [
        ("layout conformance", layout_conformance, Some(Duration::from_secs(5))),
        ("end-to-end causality fuzz", causality_fuzz, Some(Duration::from_secs(60))),
        ("gradient pathway identities", pathway_identities, Some(Duration::from_secs(60))),
        ("full-model gradcheck", full_gradcheck, Some(Duration::from_secs(300))),
        ("zero-context equivalence", zero_context_equivalence, Some(Duration::from_secs(10))),
        ("incremental inference equivalence", incremental_inference, Some(Duration::from_secs(120))),
        ("complexity claims", complexity_claims, Some(Duration::from_secs(10))),
        ("determinism and resume", determinism_and_resume, Some(Duration::from_secs(600))),
        ("desk-scale directional experiment", desk_experiment, None),
        ("ablation harness", ablation_harness, None),
    ];
    // Filter like libtest: `cargo test --test acceptance -- layout`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let timing = match budget {
            Some(b) => format!("{:.1}s of {}s", took.as_secs_f64(), b.as_secs()),
            None => format!("{:.1}s", took.as_secs_f64()),
        };
        let outcome = match (outcome, budget) {
            (Outcome::Pass(d), Some(b)) if took > b => fail(format!("over time budget; {d}")),
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {:>2}. {name} ({timing}): {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
