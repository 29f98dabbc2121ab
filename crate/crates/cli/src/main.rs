use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lightcts_cli::commands::{
    cmd_eval, cmd_profile, cmd_study, cmd_synth, cmd_train, CliError, OutputFormat,
};
use lightcts_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "lightcts",
    about = "Lightweight correlated-time-series forecasting workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> OutputFormat {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Table => OutputFormat::Table,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic correlated-series dataset.
    Synth {
        /// Run configuration file (key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving data.cts, values.csv, and adjacency.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best validation snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving model.lcts and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving metrics.csv; omit to print only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count parameters and forward FLOPs without training.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Directory receiving profile.csv or profile.txt; omit to print only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter, training a model per value.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving study.csv; omit to print only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let r = cmd_synth(&cfg, &out)?;
            println!(
                "wrote {} series x {} steps x {} feature(s) to {}",
                r.n,
                r.t,
                r.f,
                r.dataset_path.display()
            );
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let r = cmd_train(&cfg, &out)?;
            println!(
                "trained {} parameters for {} epoch(s); best validation MAE {:.6} at epoch {}",
                r.n_params, r.epochs_run, r.best_val_mae, r.best_epoch
            );
            println!("checkpoint: {}", r.checkpoint_path.display());
            println!("history:    {}", r.history_path.display());
        }
        Command::Eval { config, out } => {
            let cfg = load_config(&config, None)?;
            let r = cmd_eval(&cfg, out.as_deref())?;
            print!("{}", r.csv);
            if let Some(path) = r.metrics_path {
                println!("metrics: {}", path.display());
            }
        }
        Command::Profile {
            config,
            format,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let r = cmd_profile(&cfg, format.into(), out.as_deref())?;
            print!("{}", r.text);
            if let Some(path) = r.report_path {
                println!("report: {}", path.display());
            }
        }
        Command::Study { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let r = cmd_study(&cfg, out.as_deref())?;
            print!("{}", r.csv);
            if let Some(path) = r.report_path {
                println!("report: {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; anything else is a
            // usage problem and exits like a config validation failure.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
