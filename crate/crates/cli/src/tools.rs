//! `flops` and `gradcheck`.

use anyhow::Result;
use clap::Args;
use contextlm::complexity::overhead_report;
use contextlm::model::ModelConfig;
use contextlm::tensor::OpKind;
use contextlm::verify::run_suite;

use crate::config::{resolve, Override, RunConfig};
use crate::{usage, ConfigArgs};

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Sequence length; defaults to train.seq_len.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Batch size for the timed comparison.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Also time this many forward passes of each model.
    #[arg(long, value_name = "REPS")]
    pub time: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model settings over the tiny default (d=8, 2 heads, 0/2 split, 2 predictor layers, w=4).
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
    /// Scale one op's backward rule by 1.01 (demonstrates that the suite catches it).
    #[arg(long, value_name = "OP", hide = true)]
    pub inject_fault: Option<String>,
}

pub fn cmd_flops(args: FlopsArgs, overrides: &[Override]) -> Result<()> {
    let config = resolve(RunConfig::default(), args.cfg.config.as_deref(), overrides)?;
    config.model.validate()?;
    let seq_len = args.seq_len.unwrap_or(config.train.seq_len);
    if seq_len == 0 || seq_len > config.model.max_seq_len {
        return Err(usage(format!(
            "--seq-len must be in [1, {}], got {seq_len}",
            config.model.max_seq_len
        )));
    }
    if args.batch == 0 || args.time == Some(0) {
        return Err(usage("--batch and --time must be positive"));
    }
    let report = overhead_report(&config.model, seq_len, args.time.map(|reps| (args.batch, reps)))?;
    if args.json {
        crate::say!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        crate::say!("{}", report.to_string().trim_end());
    }
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs, overrides: &[Override]) -> Result<()> {
    let base = RunConfig {
        model: ModelConfig::tiny(),
        ..RunConfig::default()
    };
    let config = resolve(base, args.cfg.config.as_deref(), overrides)?;
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::from_name(name).filter(|k| OpKind::DIFFERENTIABLE.contains(k)).ok_or_else(|| {
            let names: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            usage(format!("--inject-fault: unknown op `{name}` (expected one of {})", names.join(", ")))
        })?),
        None => None,
    };
    let report = run_suite(&config.model, args.seq_len, args.seed, fault)?;
    if args.json {
        crate::say!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        crate::say!(
            "gradcheck: d={} heads={} split={}/{}+{} w={} mode={:?} T={} (f64)",
            config.model.d_model,
            config.model.n_heads,
            config.model.n_enc_layers,
            config.model.n_dec_layers,
            config.model.n_ctx_layers,
            config.model.chunk_size,
            config.model.mode,
            args.seq_len
        );
        for c in &report.checks {
            let detail = c.detail.as_deref().map(|d| format!("  ({d})")).unwrap_or_default();
            crate::say!(
                "  {}  {:<68} {:.3e} <= {:.0e}{detail}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.residual,
                c.tolerance
            );
        }
    }
    let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradcheck failed: {}", failed.join(", ")))
    }
}
