//! `vpo`: run experiment specs, aggregate results, and run the
//! verification suites.
//!
//! Exit codes: 0 on success, 1 when a run cell or suite fails, 2 when the
//! spec or command line is invalid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpo_core::experiment_io::suites::{gradcheck_suite, verify_all, SuiteResult};
use vpo_core::experiment_io::{aggregate_dir, parse_spec, run_spec, ExperimentSpec, RunOptions};
use vpo_core::VpoError;

#[derive(Parser)]
#[command(name = "vpo", version, about = "Value-incentivized preference optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Output directory (overrides the spec's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cells run in parallel; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Added to every seed in the spec.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, seed) cell of a TOML or JSON spec.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute aggregate.csv from the raw CSVs in a results directory.
    Aggregate { dir: PathBuf },
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Run the saddle-point, Hellinger, token-level and dual-J* suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Run the default online bandit experiment (MLE against three VPO settings).
    Demo {
        #[command(flatten)]
        flags: RunFlags,
    },
}

enum Failure {
    Spec(String),
    Run(String),
}

impl From<VpoError> for Failure {
    fn from(e: VpoError) -> Self {
        match e {
            VpoError::Spec { .. } | VpoError::Config(_) => Failure::Spec(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Spec(format!("{}: {e}", path.display())))?;
    let parsed = parse_spec(&text)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok(parsed.spec)
}

fn execute(spec: ExperimentSpec, flags: RunFlags) -> Result<(), Failure> {
    let spec = spec.with_seed_offset(flags.seed_offset)?;
    let opts = RunOptions {
        jobs: flags.jobs,
        output: flags.out,
    };
    let outcome = run_spec(&spec, &opts).map_err(|e| Failure::Run(e.to_string()))?;
    let total = outcome.manifest.cells.len();
    let failed: Vec<_> = outcome.manifest.failed().collect();
    println!(
        "{}: {} of {total} cells succeeded; results in {}",
        spec.name,
        total - failed.len(),
        outcome.out_dir.display()
    );
    for cell in &failed {
        println!(
            "  failed {} seed {}: {}",
            cell.algorithm,
            cell.seed,
            cell.error.as_deref().unwrap_or("unknown error")
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("{} cells failed", failed.len())))
    }
}

fn report(results: &[SuiteResult]) -> Result<(), Failure> {
    for r in results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Run("verification failed".into()))
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { spec, flags } => execute(load_spec(&spec)?, flags),
        Command::Demo { flags } => execute(ExperimentSpec::online_mab_default(), flags),
        Command::Aggregate { dir } => {
            let rows = aggregate_dir(&dir)?;
            println!("wrote {} aggregate rows to {}", rows.len(), dir.join("aggregate.csv").display());
            Ok(())
        }
        Command::Gradcheck { instances, seed_offset } => report(&[gradcheck_suite(seed_offset, instances)?]),
        Command::Verify { seed_offset } => report(&verify_all(seed_offset)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Spec(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
