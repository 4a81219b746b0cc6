use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lil_cli::commands;
use lil_cli::config::parse_seeds;
use lil_cli::tables::render_summary;
use lil_cli::{CliError, ExperimentConfig, Result};
use lil_core::trainer::Method;

#[derive(Parser)]
#[command(name = "lil", version, about = "Lifelong imitation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and expert demonstrations.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output root (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method for every seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        /// Comma-separated seed list (overrides `seeds`).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain seeds that already finished.
        #[arg(long)]
        force: bool,
    },
    /// Summarise finished runs: one row per seed plus mean ± standard error.
    Eval {
        /// A method directory holding `seed_*` runs, or a single run.
        #[arg(long, conflicts_with = "config")]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires = "config")]
        method: Option<Method>,
        #[arg(long, requires = "config")]
        out: Option<PathBuf>,
        /// Re-run every evaluation from the saved checkpoints instead of
        /// reading the tables written during training.
        #[arg(long)]
        recompute: bool,
    },
    /// Compare runs and export per-step success and drift series.
    Report {
        /// Method or run directories sharing one suite.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load(&config, out)?;
            let s = commands::gen_data(&cfg)?;
            println!("wrote {} files to {}", s.files.len(), s.data_dir.display());
        }
        Command::Train { config, method, seeds, out, force } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            let method = method.unwrap_or(cfg.method());
            cfg.train.method = Some(method);
            cfg.validate()?;
            for o in commands::train(&cfg, method, force)? {
                let state = if o.skipped { "skipped (complete)" } else { "done" };
                println!(
                    "{method} seed {}: {state}  FWT {:.3}  NBT {:.3}  AUC {:.3}  -> {}",
                    o.seed,
                    o.metrics.fwt,
                    o.metrics.nbt,
                    o.metrics.auc,
                    o.run_dir.display()
                );
            }
        }
        Command::Eval { run, config, method, out, recompute } => {
            let dir = match (run, config) {
                (Some(dir), _) => dir,
                (None, Some(config)) => {
                    let cfg = load(&config, out)?;
                    cfg.method_dir(method.unwrap_or(cfg.method()))
                }
                (None, None) => return Err(CliError::Config("eval needs --run or --config".into())),
            };
            let r = commands::eval(&dir, recompute, None)?;
            print!("{}", render_summary(&r.summary));
        }
        Command::Report { runs, out } => {
            let r = commands::report(&runs, &out)?;
            print!("{}", render_summary(&r.comparison));
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
