use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deepide_cli::{
    cmd_baseline, cmd_evaluate, cmd_extract_flow, cmd_filter, cmd_fit_residuals, cmd_forecast, cmd_simulate, cmd_train,
    CliError, RunConfig,
};

#[derive(Parser)]
#[command(name = "deepide", version, about = "CNN-driven integro-difference forecasting on lattice frames")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Forecast horizon for `forecast`.
    #[arg(long, global = true, default_value_t = 1)]
    steps: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic training sequences, a test sequence and its observations.
    Simulate,
    /// Fit the network on a directory of sequence files.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the Matérn residual noise and write an updated checkpoint.
    FitResiduals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the ensemble filter over an observations CSV.
    Filter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        obs: PathBuf,
    },
    /// Forecast `--steps` ahead of a saved filter state.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: PathBuf,
    },
    /// Score forecast directories or sequence files against the truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
    },
    /// Write the flow the network reads off the last frames of a sequence file.
    ExtractFlow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: PathBuf,
    },
    /// Windowed vanilla IDE forecasts from an observations CSV.
    Baseline {
        #[arg(long)]
        obs: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::config("--threads", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config("--threads", e.to_string()))?;
    }
    let out = &cli.out;
    match &cli.command {
        Command::Simulate => cmd_simulate(&config, out),
        Command::Train { data } => cmd_train(&config, data, out),
        Command::FitResiduals { checkpoint, data } => cmd_fit_residuals(&config, checkpoint, data, out),
        Command::Filter { checkpoint, obs } => cmd_filter(&config, checkpoint, obs, out),
        Command::Forecast { checkpoint, state } => cmd_forecast(&config, checkpoint, state, cli.steps, out),
        Command::Evaluate { truth, pred } => cmd_evaluate(&config, truth, pred, out),
        Command::ExtractFlow { checkpoint, window } => cmd_extract_flow(&config, checkpoint, window, out),
        Command::Baseline { obs } => cmd_baseline(&config, obs, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::config("args", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
