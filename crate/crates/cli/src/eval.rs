//! `eval`: perplexity and position-bucketed loss, with an optional ΔNLL
//! against a second checkpoint.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use contextlm::data::{load_corpus, Corpus, Split};
use contextlm::eval::{bucketed_position_loss, delta_loss_curve, even_buckets, EvalReport};

use crate::config::{resolve, Override, RunConfig};
use crate::run::{load_params, run_dir_of, with_params, AnyParams};
use crate::{usage, ConfigArgs};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Corpus settings; defaults to config.resolved.json beside the checkpoint.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint; ΔNLL is reported as checkpoint minus compare.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Window lengths (comma separated); defaults to the training length.
    #[arg(long, value_delimiter = ',')]
    pub seq_len: Vec<usize>,
    /// Non-overlapping windows per length; defaults to train.eval_windows.
    #[arg(long)]
    pub windows: Option<usize>,
    /// Equal-width position buckets.
    #[arg(long, default_value_t = 8)]
    pub buckets: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Report directory; defaults to `reports/` in the checkpoint's run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config for data access: explicit file, else the echo next to `checkpoint`.
pub fn data_config(cfg: &ConfigArgs, checkpoint: &Path, overrides: &[Override]) -> Result<RunConfig> {
    let echoed = run_dir_of(checkpoint).join("config.resolved.json");
    let file = cfg.config.clone().or_else(|| echoed.is_file().then_some(echoed));
    resolve(RunConfig::default(), file.as_deref(), overrides)
}

fn label_of(checkpoint: &Path) -> String {
    let dir = run_dir_of(checkpoint);
    dir.canonicalize()
        .unwrap_or(dir)
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn evaluate(params: &AnyParams, corpus: &Corpus, split: Split, seq_len: usize, windows: usize, buckets: usize) -> Result<EvalReport> {
    with_params!(params, p => {
        let max = p.config().max_seq_len;
        if seq_len > max {
            return Err(usage(format!("--seq-len {seq_len} exceeds the model's max_seq_len {max}")));
        }
        Ok(bucketed_position_loss(p, corpus, split, seq_len, windows, &even_buckets(seq_len, buckets))?)
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_eval(args: EvalArgs, overrides: &[Override]) -> Result<()> {
    let config = data_config(&args.cfg, &args.checkpoint, overrides)?;
    let corpus_path = config.corpus_path()?;
    if args.buckets == 0 {
        return Err(usage("--buckets must be positive"));
    }
    if args.seq_len.contains(&0) {
        return Err(usage("--seq-len values must be positive"));
    }
    let a = load_params(&args.checkpoint)?;
    let b = args.compare.as_deref().map(load_params).transpose()?;
    let corpus = load_corpus(corpus_path, config.data.val_fraction)?;
    let seq_lens = if args.seq_len.is_empty() {
        vec![config.train.seq_len]
    } else {
        args.seq_len.clone()
    };
    let windows = args.windows.unwrap_or(config.train.eval_windows);
    let split = Split::from(args.split);
    let out = args.out.clone().unwrap_or_else(|| run_dir_of(&args.checkpoint).join("reports"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let label_a = label_of(&args.checkpoint);
    let label_b = match &args.compare {
        Some(path) => {
            let l = label_of(path);
            if l == label_a {
                format!("{l}_compare")
            } else {
                l
            }
        }
        None => String::new(),
    };
    for &t in &seq_lens {
        let ra = evaluate(&a, &corpus, split, t, windows, args.buckets)?;
        write_json(&out.join(format!("eval_{label_a}_T{t}.json")), &ra)?;
        crate::say!(
            "{label_a}  T={t}  {} windows  nll {:.4}  ppl {:.3}",
            ra.windows, ra.mean_nll, ra.perplexity
        );
        if let Some(b) = &b {
            let rb = evaluate(b, &corpus, split, t, windows, args.buckets)?;
            write_json(&out.join(format!("eval_{label_b}_T{t}.json")), &rb)?;
            crate::say!(
                "{label_b}  T={t}  {} windows  nll {:.4}  ppl {:.3}",
                rb.windows, rb.mean_nll, rb.perplexity
            );
            let delta = delta_loss_curve(&ra, &rb, &label_a, &label_b)?;
            let path = out.join(format!("delta_{label_a}_vs_{label_b}_T{t}.json"));
            write_json(&path, &delta)?;
            crate::say!("  delta nll ({label_a} - {label_b}) by position:");
            for d in &delta.buckets {
                crate::say!("    [{:>4}, {:>4})  {:+.4}", d.start, d.end, d.delta_nll);
            }
            crate::say!("  written to {}", path.display());
        }
    }
    Ok(())
}
