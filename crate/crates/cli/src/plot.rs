//! `plot-data`: CSV series from metrics and reports. No rendering.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use contextlm::eval::DeltaCurve;
use contextlm::train::MetricRecord;

use crate::ablate::AblationSummary;
use crate::usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Train and validation loss per step, two columns per run (metrics.jsonl or run directories).
    LossCurve,
    /// Final validation NLL per setting and seed (reports/ablation_*.json).
    Ablation,
    /// Per-bucket ΔNLL (one reports/delta_*.json).
    DeltaLoss,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::LossCurve => "loss-curve",
            Kind::Ablation => "ablation",
            Kind::DeltaLoss => "delta-loss",
        }
    }
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Input file or run directory; repeat for several runs.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Column label per input (defaults to the run directory name).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Output CSV; defaults to `plots_data/<kind>.csv` in the first input's run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run directory an input belongs to: the directory itself, or the file's
/// parent with a trailing `reports/` stripped.
fn run_dir(input: &Path) -> PathBuf {
    if input.is_dir() {
        return input.to_path_buf();
    }
    let parent = input
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    if parent.file_name().is_some_and(|n| n == "reports") {
        parent.parent().map_or(parent.clone(), Path::to_path_buf)
    } else {
        parent
    }
}

fn label(input: &Path) -> String {
    let dir = run_dir(input);
    dir.canonicalize()
        .unwrap_or(dir)
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn schema_error(path: &Path, what: &str, e: impl std::fmt::Display) -> anyhow::Error {
    usage(format!("{}: not a {what}: {e}", path.display()))
}

fn load_metrics(input: &Path) -> Result<Vec<MetricRecord>> {
    let path = if input.is_dir() { input.join("metrics.jsonl") } else { input.to_path_buf() };
    let f = std::fs::File::open(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| schema_error(&path, "metrics log", format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn loss_curve(inputs: &[PathBuf], labels: &[String]) -> Result<Vec<Vec<String>>> {
    let mut header = vec!["step".to_string()];
    // step -> per-run (train, val)
    let mut rows: BTreeMap<u64, Vec<(Option<f64>, Option<f64>)>> = BTreeMap::new();
    for (i, input) in inputs.iter().enumerate() {
        header.push(format!("{}_train", labels[i]));
        header.push(format!("{}_val", labels[i]));
        for rec in load_metrics(input)? {
            let row = rows.entry(rec.step).or_insert_with(|| vec![(None, None); inputs.len()]);
            match rec.split.as_str() {
                "train" => row[i].0 = Some(rec.loss),
                "val" => row[i].1 = Some(rec.loss),
                other => return Err(schema_error(input, "metrics log", format!("unknown split `{other}`"))),
            }
        }
    }
    let mut out = vec![header];
    for (step, cols) in rows {
        let mut row = vec![step.to_string()];
        for (t, v) in cols {
            row.push(cell(t));
            row.push(cell(v));
        }
        out.push(row);
    }
    Ok(out)
}

fn ablation(inputs: &[PathBuf]) -> Result<Vec<Vec<String>>> {
    let mut out = vec![["axis", "value", "seed", "val_nll"].map(String::from).to_vec()];
    for input in inputs {
        let s: AblationSummary =
            serde_json::from_str(&read(input)?).map_err(|e| schema_error(input, "ablation summary", e))?;
        for r in &s.runs {
            out.push(vec![
                s.axis.name().to_string(),
                r.value.clone(),
                r.seed.to_string(),
                format!("{}", r.final_val_nll),
            ]);
        }
    }
    Ok(out)
}

fn delta_loss(inputs: &[PathBuf]) -> Result<Vec<Vec<String>>> {
    let [input] = inputs else {
        return Err(usage("delta-loss takes exactly one --input (one curve per sequence length)"));
    };
    let curve: DeltaCurve = serde_json::from_str(&read(input)?).map_err(|e| schema_error(input, "delta curve", e))?;
    let mut out = vec![["bucket_start", "bucket_end", "delta_nll"].map(String::from).to_vec()];
    for b in &curve.buckets {
        out.push(vec![b.start.to_string(), b.end.to_string(), format!("{}", b.delta_nll)]);
    }
    Ok(out)
}

pub fn cmd_plot_data(args: PlotArgs) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.inputs.len() {
        return Err(usage(format!(
            "{} --label values for {} --input values",
            args.labels.len(),
            args.inputs.len()
        )));
    }
    let labels: Vec<String> = if args.labels.is_empty() {
        args.inputs.iter().map(|p| label(p)).collect()
    } else {
        args.labels.clone()
    };
    let rows = match args.kind {
        Kind::LossCurve => loss_curve(&args.inputs, &labels)?,
        Kind::Ablation => ablation(&args.inputs)?,
        Kind::DeltaLoss => delta_loss(&args.inputs)?,
    };
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| run_dir(&args.inputs[0]).join("plots_data").join(format!("{}.csv", args.kind.name())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    crate::say!("{} rows written to {}", rows.len() - 1, path.display());
    Ok(())
}
