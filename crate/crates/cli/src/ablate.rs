//! `ablate`: sequential sweeps over one config axis and a set of seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use contextlm::model::Mode;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, Override, RunConfig};
use crate::run::{latest_checkpoint, read_summary, train_in_dir, RunLock, Start};
use crate::{usage, ConfigArgs};

/// Largest ContextLM-minus-baseline NLL (nats) tolerated in any seed.
pub const MODE_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[value(name = "chunk_size")]
    ChunkSize,
    #[value(name = "ctx_depth")]
    CtxDepth,
    #[value(name = "enc_dec_split")]
    EncDecSplit,
    #[value(name = "mode")]
    Mode,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::ChunkSize => "chunk_size",
            Axis::CtxDepth => "ctx_depth",
            Axis::EncDecSplit => "enc_dec_split",
            Axis::Mode => "mode",
        }
    }

    /// Sets this axis to `value` in `config`.
    fn apply(self, config: &mut RunConfig, value: &str) -> Result<(), String> {
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a non-negative integer"));
        match self {
            Axis::ChunkSize => config.model.chunk_size = int(value)?,
            Axis::CtxDepth => config.model.n_ctx_layers = int(value)?,
            Axis::EncDecSplit => {
                let (e, d) = value
                    .split_once('/')
                    .ok_or_else(|| format!("`{value}` is not of the form ENC/DEC"))?;
                config.model.n_enc_layers = int(e)?;
                config.model.n_dec_layers = int(d)?;
            }
            Axis::Mode => {
                config.model.mode = match value.trim() {
                    "baseline" => Mode::Baseline,
                    "contextlm" => Mode::ContextLm,
                    other => return Err(format!("`{other}` is not baseline or contextlm")),
                }
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Settings to sweep (comma separated), e.g. 2,4,8,16 or 0/4,2/2 or baseline,contextlm.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Seeds; each sets both model.seed and train.seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Sweep directory; defaults to run.out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reuse finished runs and resume interrupted ones instead of refusing.
    #[arg(long)]
    pub skip_existing: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub final_val_nll: f64,
    pub params: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub value: String,
    pub mean_val_nll: f64,
    /// Population standard deviation over seeds.
    pub std_val_nll: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub baseline_nll: f64,
    pub contextlm_nll: f64,
    /// `contextlm − baseline`; negative favours ContextLM.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub per_seed: Vec<SeedDelta>,
    /// Seeds where ContextLM NLL ≤ baseline NLL.
    pub contextlm_wins: usize,
    /// At least two thirds of seeds won.
    pub expected_direction: bool,
    pub margin: f64,
    /// Every seed within `margin` of the baseline.
    pub within_margin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub runs: Vec<AblationRun>,
    pub settings: Vec<AblationSetting>,
    /// Direction of mean NLL along `values` as listed.
    pub trend: String,
    pub comparison: Option<ModeComparison>,
}

fn dir_name(axis: Axis, value: &str, seed: u64) -> String {
    format!("{}_{}_seed{seed}", axis.name(), value.trim().replace('/', "-"))
}

pub fn trend(means: &[f64]) -> &'static str {
    if means.len() < 2 {
        return "n/a";
    }
    let pairs = means.windows(2);
    if pairs.clone().all(|p| p[1] > p[0]) {
        "increasing"
    } else if pairs.clone().all(|p| p[1] < p[0]) {
        "decreasing"
    } else {
        "non-monotone"
    }
}

fn mode_comparison(runs: &[AblationRun], seeds: &[u64]) -> Option<ModeComparison> {
    let nll = |mode: &str, seed: u64| {
        runs.iter()
            .find(|r| r.value.trim() == mode && r.seed == seed)
            .map(|r| r.final_val_nll)
    };
    let per_seed: Vec<SeedDelta> = seeds
        .iter()
        .map(|&seed| {
            let (b, c) = (nll("baseline", seed)?, nll("contextlm", seed)?);
            Some(SeedDelta {
                seed,
                baseline_nll: b,
                contextlm_nll: c,
                delta: c - b,
            })
        })
        .collect::<Option<_>>()?;
    let wins = per_seed.iter().filter(|d| d.delta <= 0.0).count();
    Some(ModeComparison {
        contextlm_wins: wins,
        expected_direction: 3 * wins >= 2 * per_seed.len(),
        margin: MODE_MARGIN,
        within_margin: per_seed.iter().all(|d| d.delta <= MODE_MARGIN),
        per_seed,
    })
}

pub fn summarize(axis: Axis, values: &[String], seeds: &[u64], steps: u64, runs: Vec<AblationRun>) -> AblationSummary {
    let settings: Vec<AblationSetting> = values
        .iter()
        .map(|v| {
            let xs: Vec<f64> = runs.iter().filter(|r| &r.value == v).map(|r| r.final_val_nll).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            AblationSetting {
                value: v.clone(),
                mean_val_nll: mean,
                std_val_nll: var.sqrt(),
                seeds: xs.len(),
            }
        })
        .collect();
    let means: Vec<f64> = settings.iter().map(|s| s.mean_val_nll).collect();
    let comparison = (axis == Axis::Mode).then(|| mode_comparison(&runs, seeds)).flatten();
    AblationSummary {
        axis,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        steps,
        trend: trend(&means).to_string(),
        runs,
        settings,
        comparison,
    }
}

pub fn render(s: &AblationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ablation over {} ({} steps per run)", s.axis.name(), s.steps);
    let _ = writeln!(out, "{:<14} {:>6} {:>12}", "value", "seed", "val nll");
    for r in &s.runs {
        let _ = writeln!(out, "{:<14} {:>6} {:>12.4}", r.value, r.seed, r.final_val_nll);
    }
    let _ = writeln!(out, "\n{:<14} {:>12} {:>10} {:>6}", "value", "mean nll", "std", "seeds");
    for g in &s.settings {
        let _ = writeln!(
            out,
            "{:<14} {:>12.4} {:>10.4} {:>6}",
            g.value, g.mean_val_nll, g.std_val_nll, g.seeds
        );
    }
    let _ = writeln!(out, "trend of mean nll along the listed values: {}", s.trend);
    if let Some(c) = &s.comparison {
        let _ = writeln!(out, "\ncontextlm vs baseline (delta = contextlm - baseline)");
        let _ = writeln!(out, "{:>6} {:>12} {:>12} {:>10}", "seed", "baseline", "contextlm", "delta");
        for d in &c.per_seed {
            let _ = writeln!(
                out,
                "{:>6} {:>12.4} {:>12.4} {:>+10.4}",
                d.seed, d.baseline_nll, d.contextlm_nll, d.delta
            );
        }
        let _ = writeln!(
            out,
            "contextlm <= baseline in {} of {} seeds (expected direction: {})",
            c.contextlm_wins,
            c.per_seed.len(),
            if c.expected_direction { "yes" } else { "no" }
        );
        let _ = writeln!(
            out,
            "contextlm within baseline + {:.2} nats in every seed: {}",
            c.margin,
            if c.within_margin { "yes" } else { "no" }
        );
    }
    out
}

/// One planned run of the sweep.
struct Plan {
    value: String,
    seed: u64,
    config: RunConfig,
}

fn plan(base: &RunConfig, args: &AblateArgs, out: &Path) -> Result<Vec<Plan>> {
    if args.values.iter().all(|v| v.trim().is_empty()) {
        return Err(usage("--values is empty: nothing to sweep"));
    }
    if args.seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    if matches!(args.axis, Axis::ChunkSize | Axis::CtxDepth) && !base.model.is_contextlm() {
        return Err(usage(format!("--axis {} needs model.mode = contextlm", args.axis.name())));
    }
    let mut plans = Vec::new();
    let mut errors = Vec::new();
    for value in &args.values {
        for &seed in &args.seeds {
            let mut config = base.clone();
            if let Err(e) = args.axis.apply(&mut config, value) {
                errors.push(format!("{} value {e}", args.axis.name()));
                break;
            }
            config.model.seed = seed;
            config.train.seed = seed;
            config.run.out_dir = out.join(dir_name(args.axis, value, seed));
            if let Err(contextlm::Error::Config(es)) = config.validate() {
                errors.extend(es.into_iter().map(|e| format!("{} = {value}: {e}", args.axis.name())));
                break;
            }
            plans.push(Plan {
                value: value.trim().to_string(),
                seed,
                config,
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    for p in &plans {
        if !seen.insert(p.config.run.out_dir.clone()) {
            errors.push(format!("duplicate setting {} (seed {})", p.value, p.seed));
        }
    }
    if errors.is_empty() {
        Ok(plans)
    } else {
        Err(contextlm::Error::Config(errors).into())
    }
}

pub fn cmd_ablate(args: AblateArgs, overrides: &[Override]) -> Result<()> {
    let base = resolve(RunConfig::default(), args.cfg.config.as_deref(), overrides)?;
    let out = args.out.clone().unwrap_or_else(|| base.run.out_dir.clone());
    let plans = plan(&base, &args, &out)?;
    base.corpus_path()?;
    let mut runs = Vec::with_capacity(plans.len());
    for (i, p) in plans.iter().enumerate() {
        let dir = &p.config.run.out_dir;
        eprintln!("[{}/{}] {} = {} seed {} -> {}", i + 1, plans.len(), args.axis.name(), p.value, p.seed, dir.display());
        let _lock = RunLock::acquire(dir)?;
        let previous = read_summary(dir)?.filter(|s| s.complete());
        let echoed = std::fs::read_to_string(dir.join("config.resolved.json")).ok();
        let same_config = echoed
            .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
            .is_some_and(|c| c == p.config);
        let summary = match previous {
            Some(s) if args.skip_existing && same_config => {
                eprintln!("  reusing finished run");
                s
            }
            _ => {
                let start = match latest_checkpoint(dir)? {
                    Some(ckpt) if args.skip_existing && same_config => Start::Resume(ckpt),
                    _ => Start::Fresh,
                };
                train_in_dir(&p.config, dir, &start, None, !args.quiet)?
            }
        };
        runs.push(AblationRun {
            value: p.value.clone(),
            seed: p.seed,
            dir: dir.clone(),
            final_val_nll: summary
                .final_val_nll
                .with_context(|| format!("{} finished without a validation loss", dir.display()))?,
            params: summary.params,
            wall_ms: summary.wall_ms,
        });
    }
    let values: Vec<String> = args.values.iter().map(|v| v.trim().to_string()).collect();
    let summary = summarize(args.axis, &values, &args.seeds, base.train.steps, runs);
    let reports = out.join("reports");
    std::fs::create_dir_all(&reports)?;
    let json = reports.join(format!("ablation_{}.json", args.axis.name()));
    std::fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let text = render(&summary);
    std::fs::write(reports.join(format!("ablation_{}.txt", args.axis.name())), &text)?;
    crate::say!("{}", text.trim_end());
    crate::say!("summary written to {}", json.display());
    Ok(())
}
