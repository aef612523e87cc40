//! `modesched` command-line tool.

mod config;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{prepare, RunMode};
use crate::run::{execute, Outcome};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "modesched",
    version,
    about = "Projection-based mode scheduling for switched systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise a schedule over one horizon.
    Optimize(CommonArgs),
    /// Run the receding-horizon controller.
    Horizon {
        #[command(flatten)]
        common: CommonArgs,
        /// Also simulate the uncontrolled system.
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file, or a directory of them.
    config: PathBuf,
    /// Validate the configuration and print it with defaults filled in.
    #[arg(long)]
    dry_run: bool,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads when CONFIG is a directory.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Runs one configuration and returns its exit code.
fn run_one(
    path: &Path,
    args: &CommonArgs,
    expected: RunMode,
    baseline: bool,
    out: Option<&Path>,
) -> u8 {
    let prepared = match prepare(path, out, args.seed).and_then(|p| {
        if p.config.mode != expected {
            bail!(
                "configuration mode {:?} does not match the command",
                p.config.mode
            );
        }
        Ok(p)
    }) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {}: {e:#}", path.display());
            return EXIT_CONFIG;
        }
    };
    if args.dry_run {
        match serde_json::to_string_pretty(&prepared.config) {
            Ok(text) => {
                let _ = writeln!(std::io::stdout(), "{text}");
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_RUNTIME;
            }
        }
        return 0;
    }
    match execute(&prepared, baseline) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {}: run failed at {msg}", path.display());
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {}: {e:#}", path.display());
            EXIT_RUNTIME
        }
    }
}

fn config_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .json configurations in {}", dir.display());
    }
    Ok(files)
}

fn dispatch(args: &CommonArgs, mode: RunMode, baseline: bool) -> u8 {
    if !args.config.is_dir() {
        return run_one(&args.config, args, mode, baseline, args.out.as_deref());
    }
    let files = match config_files(&args.config) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_CONFIG;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let codes: Vec<u8> = pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let out = args
                    .out
                    .as_ref()
                    .map(|o| o.join(f.file_stem().unwrap_or_default()));
                run_one(f, args, mode, baseline, out.as_deref())
            })
            .collect()
    });
    codes.into_iter().max().unwrap_or(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MODESCHED_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Optimize(args) => dispatch(args, RunMode::Optimize, false),
        Command::Horizon { common, baseline } => dispatch(common, RunMode::Horizon, *baseline),
    };
    ExitCode::from(code)
}
