//! `generate` and `export-attn`: single-prompt views of a checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use contextlm::data::{decode, encode};
use contextlm::eval::export_attention;
use contextlm::inference::{generate, SamplerConfig, Strategy};
use serde::Serialize;

use crate::run::{load_params, run_dir_of, with_params, AnyParams};
use crate::usage;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prompt text, fed to the model as bytes.
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print ids and text as JSON instead of plain text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ExportAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Backbone layers to export (comma separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Heads to export (comma separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    /// Output file; defaults to `reports/attention.json` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Generation {
    prompt_ids: Vec<usize>,
    new_ids: Vec<usize>,
    text: String,
    sampler: SamplerConfig,
}

/// Prompt bytes as ids, checked against the model's vocabulary and length.
fn prompt_ids(prompt: &str, params: &AnyParams, extra: usize) -> Result<Vec<usize>> {
    let ids = encode(prompt.as_bytes());
    if ids.is_empty() {
        return Err(usage("--prompt must not be empty"));
    }
    let (vocab, max) = with_params!(params, p => (p.config().vocab_size, p.config().max_seq_len));
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(usage(format!("prompt byte {bad} is outside the model vocabulary of {vocab}")));
    }
    if ids.len() + extra > max {
        return Err(usage(format!(
            "prompt ({} bytes) plus {extra} new tokens exceeds max_seq_len {max}",
            ids.len()
        )));
    }
    Ok(ids)
}

pub fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let sampler = SamplerConfig {
        strategy: match args.strategy {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Temperature => Strategy::Temperature,
            StrategyArg::TopK => Strategy::TopK,
        },
        temperature: args.temperature,
        top_k: args.top_k,
        seed: args.seed,
    };
    sampler.validate()?;
    let params = load_params(&args.checkpoint)?;
    let ids = prompt_ids(&args.prompt, &params, args.max_new)?;
    let out = with_params!(&params, p => generate(p, &ids, args.max_new, &sampler)?);
    let new_ids = out[ids.len()..].to_vec();
    let text = String::from_utf8_lossy(&decode(&new_ids)?).into_owned();
    if args.json {
        let g = Generation {
            prompt_ids: ids,
            new_ids,
            text,
            sampler,
        };
        crate::say!("{}", serde_json::to_string_pretty(&g)?);
    } else {
        crate::say!("{}{}", args.prompt, text);
    }
    Ok(())
}

pub fn cmd_export_attn(args: ExportAttnArgs) -> Result<()> {
    let params = load_params(&args.checkpoint)?;
    let ids = prompt_ids(&args.prompt, &params, 0)?;
    let (n_layers, n_heads) = with_params!(&params, p => (p.config().backbone_layers(), p.config().n_heads));
    if let Some(l) = args.layers.iter().find(|&&l| l >= n_layers) {
        return Err(usage(format!("--layers: layer {l} out of range (model has {n_layers} backbone layers)")));
    }
    if let Some(h) = args.heads.iter().find(|&&h| h >= n_heads) {
        return Err(usage(format!("--heads: head {h} out of range (model has {n_heads} heads)")));
    }
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(&args.checkpoint).join("reports").join("attention.json"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let layers = (!args.layers.is_empty()).then_some(args.layers.as_slice());
    let heads = (!args.heads.is_empty()).then_some(args.heads.as_slice());
    let dump = with_params!(&params, p => export_attention(p, &ids, layers, heads, &path)?);
    crate::say!(
        "{} matrices over {} tokens written to {}",
        dump.matrices.len(),
        dump.tokens.len(),
        path.display()
    );
    Ok(())
}
