//! `train` and the run-directory plumbing it shares with `ablate`.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use contextlm::complexity::count_params;
use contextlm::data::{load_corpus, Corpus};
use contextlm::model::{Mode, ModelParams};
use contextlm::tensor::{DType, Scalar};
use contextlm::train::{checkpoint_path, load_checkpoint, read_header, MetricRecord, RunOutput, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, Override, RunConfig};
use crate::{usage, ConfigArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Contextlm,
}

impl ModeArg {
    pub fn name(self) -> &'static str {
        match self {
            ModeArg::Baseline => "baseline",
            ModeArg::Contextlm => "contextlm",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory (same as --run.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Same as --model.mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Continue from `latest` checkpoint in the run directory or from a checkpoint path.
    #[arg(long, value_name = "latest|PATH")]
    pub resume: Option<String>,
    /// Checkpoint and stop once this many steps are complete.
    #[arg(long, value_name = "STEPS")]
    pub stop_after: Option<u64>,
    /// Do not echo metric records to stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Final state of a training run, written to `reports/train_summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub steps: u64,
    pub final_step: u64,
    pub params: u64,
    pub last_train_loss: f64,
    /// Validation NLL after the final step, when the run reached it.
    pub final_val_nll: Option<f64>,
    pub final_val_ppl: Option<f64>,
    pub wall_ms: u64,
}

impl RunSummary {
    pub fn complete(&self) -> bool {
        self.final_step == self.steps && self.final_val_nll.is_some()
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(usage(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Checkpoint with the highest step in `dir` (diagnostic dumps excluded).
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e).with_context(|| format!("listing {}", dir.display())),
    };
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Parameters of either precision, as stored in a checkpoint.
pub enum AnyParams {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

/// Runs `$body` with `$p` bound to the typed parameters.
macro_rules! with_params {
    ($any:expr, $p:ident => $body:expr) => {
        match $any {
            $crate::run::AnyParams::F32($p) => $body,
            $crate::run::AnyParams::F64($p) => $body,
        }
    };
}
pub(crate) use with_params;

pub fn load_params(path: &Path) -> Result<AnyParams> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let header = read_header(path)?;
    Ok(match header.train.dtype {
        DType::F32 => AnyParams::F32(load_checkpoint::<f32>(path)?.params),
        DType::F64 => AnyParams::F64(load_checkpoint::<f64>(path)?.params),
    })
}

/// Directory holding a checkpoint, used as the default report location.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Keeps only records at or before `step`, so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(f) = std::fs::File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let rec: MetricRecord =
            serde_json::from_str(&line).with_context(|| format!("malformed record in {}", path.display()))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).with_context(|| format!("rewriting {}", path.display()))
}

fn config_diff(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let key = format!("{prefix}.{k}");
                match y.get(k) {
                    Some(w) => config_diff(v, w, &key, out),
                    None => out.push(key),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// How a run starts.
pub enum Start {
    Fresh,
    Resume(PathBuf),
}

fn train_typed<T: Scalar>(config: &RunConfig, dir: &Path, start: &Start, corpus: &Corpus, out: &RunOutput) -> Result<RunSummary> {
    let clock = Instant::now();
    let mut trainer = match start {
        Start::Fresh => Trainer::<T>::new(&config.model, config.train.clone(), corpus)?,
        Start::Resume(path) => {
            let ckpt = load_checkpoint::<T>(path)?;
            let mut diffs = Vec::new();
            let (want, have) = (serde_json::to_value(&config.model)?, serde_json::to_value(ckpt.params.config())?);
            config_diff(&want, &have, "model", &mut diffs);
            let (want, have) = (serde_json::to_value(&config.train)?, serde_json::to_value(&ckpt.train)?);
            config_diff(&want, &have, "train", &mut diffs);
            if !diffs.is_empty() {
                return Err(usage(format!(
                    "checkpoint {} was written with a different config ({})",
                    path.display(),
                    diffs.join(", ")
                )));
            }
            truncate_metrics(&dir.join("metrics.jsonl"), ckpt.step)?;
            Trainer::from_checkpoint(ckpt, corpus)?
        }
    };
    let summary = trainer.run(corpus, out)?;
    let val = summary.final_eval.filter(|_| summary.final_step == config.train.steps);
    Ok(RunSummary {
        mode: config.model.mode,
        steps: config.train.steps,
        final_step: summary.final_step,
        params: count_params(&config.model).total,
        last_train_loss: summary.last_train_loss,
        final_val_nll: val.as_ref().map(|r| r.mean_nll),
        final_val_ppl: val.as_ref().map(|r| r.perplexity),
        wall_ms: clock.elapsed().as_millis() as u64,
    })
}

/// Trains `config` into `dir` (which the caller has locked) and writes the
/// resolved config and summary.
pub fn train_in_dir(config: &RunConfig, dir: &Path, start: &Start, stop_after: Option<u64>, echo: bool) -> Result<RunSummary> {
    let corpus_path = config.corpus_path()?;
    if matches!(start, Start::Fresh) {
        let existing = dir.join("metrics.jsonl").exists() || latest_checkpoint(dir)?.is_some();
        if existing {
            return Err(usage(format!(
                "{} already holds a run; pass --resume latest or choose another output directory",
                dir.display()
            )));
        }
    }
    let corpus = load_corpus(corpus_path, config.data.val_fraction)?;
    config.write_resolved(dir)?;
    let out = RunOutput {
        dir: Some(dir.to_path_buf()),
        stop_after,
        zero_fusion: false,
        echo,
    };
    let summary = match config.train.dtype {
        DType::F32 => train_typed::<f32>(config, dir, start, &corpus, &out)?,
        DType::F64 => train_typed::<f64>(config, dir, start, &corpus, &out)?,
    };
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let path = reports.join("train_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<Option<RunSummary>> {
    let path = dir.join("reports").join("train_summary.json");
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

pub fn cmd_train(args: TrainArgs, overrides: &[Override]) -> Result<()> {
    let mut overrides = overrides.to_vec();
    if let Some(mode) = args.mode {
        overrides.insert(0, Override { key: "model.mode".into(), value: mode.name().into() });
    }
    if let Some(out) = &args.out {
        overrides.insert(0, Override { key: "run.out_dir".into(), value: out.display().to_string() });
    }
    let mut file = args.cfg.config.clone();
    if args.resume.is_some() && file.is_none() {
        // Resuming without a config reuses the one echoed into the run directory.
        let dir = resolve(RunConfig::default(), None, &overrides)?.run.out_dir;
        let echoed = dir.join("config.resolved.json");
        if echoed.is_file() {
            file = Some(echoed);
        }
    }
    let config = resolve(RunConfig::default(), file.as_deref(), &overrides)?;
    config.validate()?;
    config.corpus_path()?;
    if args.stop_after == Some(0) {
        return Err(usage("--stop-after must be positive"));
    }
    let dir = config.run.out_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let start = match args.resume.as_deref() {
        None => Start::Fresh,
        Some("latest") => Start::Resume(
            latest_checkpoint(&dir)?.ok_or_else(|| usage(format!("no checkpoint to resume in {}", dir.display())))?,
        ),
        Some(path) => {
            let path = PathBuf::from(path);
            if !path.is_file() {
                return Err(usage(format!("--resume: no such checkpoint {}", path.display())));
            }
            Start::Resume(path)
        }
    };
    let summary = train_in_dir(&config, &dir, &start, args.stop_after, !args.quiet)?;
    match summary.final_val_nll {
        Some(nll) => crate::say!(
            "{}: {} steps, final val nll {nll:.4} (ppl {:.3}) in {}",
            dir.display(),
            summary.final_step,
            summary.final_val_ppl.unwrap_or(f64::NAN),
            checkpoint_path(&dir, summary.final_step).display()
        ),
        None => crate::say!(
            "{}: stopped at step {} of {}; continue with --resume latest",
            dir.display(),
            summary.final_step,
            summary.steps
        ),
    }
    Ok(())
}
