use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fisformer::training::Precision;
use fisformer_cli::commands::{
    cmd_ablate, cmd_bench, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_trace, cmd_train,
    CHECKPOINT_FILE,
};
use fisformer_cli::config::RunConfig;
use fisformer_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "fisformer",
    version,
    about = "Forecasting with a fuzzy-inference interaction transformer"
)]
struct Cli {
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.fisf, history.csv and run.cfg
    Train,
    /// Report validation and test metrics of a checkpoint
    Evaluate {
        /// Defaults to <out>/model.fisf
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast the horizon after the last lookback rows of a CSV
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare analytic and finite-difference gradients
    Gradcheck,
    /// Time both interaction kernels over token counts
    Bench,
    /// Train both interaction modes (or every MF kind) under one seed
    Ablate,
    /// Dump rule firings, interaction map and gate for one window
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("FISFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "FISFORMER_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<String> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse::<Precision>()?;
    }
    let out = cli.out.as_path();
    let ckpt = |c: Option<PathBuf>| c.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    match cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, &ckpt(checkpoint), Some(out)),
        Command::Predict { checkpoint, input } => cmd_predict(&cfg, &ckpt(checkpoint), &input, out),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Bench => cmd_bench(&cfg, out),
        Command::Ablate => cmd_ablate(&cfg, out),
        Command::Trace { checkpoint, window } => cmd_trace(&cfg, &ckpt(checkpoint), window, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors; here 2 is reserved for numerical failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
