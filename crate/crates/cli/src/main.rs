//! `ctxlm`: train, evaluate, sample and inspect ContextLM and baseline models.

mod ablate;
mod config;
mod eval;
mod inspect;
mod plot;
mod run;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A bad flag, config value or input file. Exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// `println!` that stops quietly when stdout is closed (e.g. piped into `head`).
#[macro_export]
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "ctxlm",
    version,
    about = "Next-token plus next-context prediction in a small transformer lab",
    after_help = "Config values resolve as: --section.key flags > --config file > defaults.\n\
                  Sections: model, train, data, run. Example: --model.chunk_size 8"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoints, metrics and the resolved config.
    Train(run::TrainArgs),
    /// Perplexity and position-bucketed loss of a checkpoint, optionally against another.
    Eval(eval::EvalArgs),
    /// Continue a byte prompt with the KV-cached decoder.
    Generate(inspect::GenerateArgs),
    /// Write backbone attention matrices for a prompt as JSON.
    ExportAttn(inspect::ExportAttnArgs),
    /// Sweep one config axis over values and seeds, then summarize.
    Ablate(ablate::AblateArgs),
    /// Parameter, FLOP and overhead accounting for a config.
    Flops(tools::FlopsArgs),
    /// Finite-difference and gradient-identity checks on a tiny model.
    Gradcheck(tools::GradcheckArgs),
    /// Turn metrics and reports into CSV series.
    PlotData(plot::PlotArgs),
}

/// Options shared by commands that resolve a run config.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON config file; `--section.key value` flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(contextlm::Error::Config(_)) = cause.downcast_ref::<contextlm::Error>() {
            return 2;
        }
    }
    1
}

/// Computation is single-threaded, so any positive cap is honoured.
fn check_threads() -> anyhow::Result<()> {
    match std::env::var("CTXLM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(usage(format!("CTXLM_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn dispatch() -> anyhow::Result<()> {
    let (args, overrides) = config::split_overrides(std::env::args_os().collect())?;
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    check_threads()?;
    let takes_overrides = matches!(
        cli.command,
        Command::Train(_) | Command::Eval(_) | Command::Ablate(_) | Command::Flops(_) | Command::Gradcheck(_)
    );
    if let (false, Some(o)) = (takes_overrides, overrides.first()) {
        return Err(usage(format!("--{} is not accepted by this command", o.key)));
    }
    match cli.command {
        Command::Train(a) => run::cmd_train(a, &overrides),
        Command::Eval(a) => eval::cmd_eval(a, &overrides),
        Command::Generate(a) => inspect::cmd_generate(a),
        Command::ExportAttn(a) => inspect::cmd_export_attn(a),
        Command::Ablate(a) => ablate::cmd_ablate(a, &overrides),
        Command::Flops(a) => tools::cmd_flops(a, &overrides),
        Command::Gradcheck(a) => tools::cmd_gradcheck(a, &overrides),
        Command::PlotData(a) => plot::cmd_plot_data(a),
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
