//! Runs every `(algorithm, seed)` cell of a spec and writes its outputs.
//!
//! Output layout under the output directory:
//!
//! ```text
//! spec.toml                       normalized spec
//! raw/<algorithm>_seed<seed>.csv  one file per succeeded cell
//! aggregate.csv                   mean and stderr across seeds
//! manifest.json                   status of every cell
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::csv_io::{aggregate, read_raw_dir, trace_rows, write_aggregate, write_raw, AggregateRow, RawRow};
use super::spec::{dump_spec, AlgorithmSpec, BehaviorSpec, ExperimentKind, ExperimentSpec, Schedule};
use crate::algorithms::{build_run, run_offline_sweep, run_online, MetricsTrace, OfflineRunConfig, OnlineRunConfig};
use crate::error::{Result, VpoError};
use crate::losses::{Sign, VpoConfig};

pub const RAW_DIR: &str = "raw";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_FILE: &str = "spec.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Cells run concurrently; 0 means one per available core.
    pub jobs: usize,
    /// Overrides the spec's output directory.
    pub output: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, output: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub algorithm: String,
    pub alpha: f64,
    pub seed: u64,
    pub status: CellStatus,
    /// Path relative to the output directory.
    pub raw_csv: Option<String>,
    pub error: Option<String>,
    /// Iteration or dataset size at which a failed run stopped.
    pub failed_at: Option<u64>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub spec_file: String,
    pub aggregate_csv: String,
    pub cells: Vec<CellReport>,
}

impl Manifest {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.status == CellStatus::Succeeded)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed)
    }
}

#[derive(Debug, Clone)]
pub struct SpecOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub aggregate: Vec<AggregateRow>,
}

pub fn raw_file_name(algorithm: &str, seed: u64) -> String {
    format!("{algorithm}_seed{seed}.csv")
}

/// Runs one cell and returns its trace. Failures inside the run are
/// reported through `MetricsTrace::failure`; errors here mean the run could
/// not be set up.
pub fn run_cell(spec: &ExperimentSpec, algorithm: &AlgorithmSpec, seed: u64) -> Result<MetricsTrace<f64>> {
    let setup = build_run::<f64>(&spec.env_spec(), seed)?;
    match &spec.schedule {
        Schedule::Online {
            iterations,
            batch_size,
            inner_steps,
        } => run_online(&OnlineRunConfig {
            env: setup.env,
            reference: setup.reference,
            iterations: *iterations,
            batch_size: *batch_size,
            inner_steps: *inner_steps,
            vpo: VpoConfig::new(algorithm.alpha, spec.beta, Sign::Online)?,
            optimizer: spec.optimizer,
            seed,
            eval_batch_size: spec.eval_batch_size(),
            calibration: spec.calibration,
            reg_context_source: spec.reg_context_source,
        }),
        Schedule::Offline {
            dataset_sizes,
            total_steps,
            behavior,
        } => {
            let behavior = match behavior {
                BehaviorSpec::Reference => setup.reference.clone(),
                BehaviorSpec::Uniform => setup.reference.with_theta(vec![0.0; setup.reference.theta().len()])?,
            };
            let cfg = OfflineRunConfig {
                env: setup.env,
                reference: setup.reference,
                behavior,
                dataset_size: *dataset_sizes.last().expect("validated non-empty"),
                total_steps: *total_steps,
                vpo: VpoConfig::new(algorithm.alpha, spec.beta, Sign::Offline)?,
                optimizer: spec.optimizer,
                seed,
                eval_batch_size: spec.eval_batch_size(),
                calibration: spec.calibration,
                reg_context_source: spec.reg_context_source,
            };
            run_offline_sweep(&cfg, dataset_sizes)
        }
    }
}

struct CellResult {
    report: CellReport,
    rows: Vec<RawRow>,
}

fn execute_cell(spec: &ExperimentSpec, algorithm: &AlgorithmSpec, seed: u64, raw_dir: &Path) -> CellResult {
    let start = Instant::now();
    let mut report = CellReport {
        algorithm: algorithm.id.clone(),
        alpha: algorithm.alpha,
        seed,
        status: CellStatus::Failed,
        raw_csv: None,
        error: None,
        failed_at: None,
        wall_time_secs: 0.0,
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| run_cell(spec, algorithm, seed)))
        .unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "run panicked".to_string());
            Err(VpoError::Domain(format!("panic: {msg}")))
        });
    let mut rows = Vec::new();
    match outcome {
        Err(e) => report.error = Some(e.to_string()),
        Ok(trace) => {
            if let Some(f) = &trace.failure {
                report.error = Some(f.message.clone());
                report.failed_at = Some(f.at);
            } else {
                let name = raw_file_name(&algorithm.id, seed);
                rows = trace_rows(&spec.name, &algorithm.id, algorithm.alpha, seed, &trace);
                let written = File::create(raw_dir.join(&name))
                    .map_err(VpoError::from)
                    .and_then(|f| write_raw(BufWriter::new(f), &rows));
                match written {
                    Ok(()) => {
                        report.status = CellStatus::Succeeded;
                        report.raw_csv = Some(format!("{RAW_DIR}/{name}"));
                    }
                    Err(e) => {
                        report.error = Some(format!("writing {name}: {e}"));
                        rows.clear();
                    }
                }
            }
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    match report.status {
        CellStatus::Succeeded => log::info!(
            "{} seed {}: done in {:.1}s",
            algorithm.id,
            seed,
            report.wall_time_secs
        ),
        CellStatus::Failed => log::warn!(
            "{} seed {}: failed: {}",
            algorithm.id,
            seed,
            report.error.as_deref().unwrap_or("")
        ),
    }
    CellResult { report, rows }
}

/// Runs the whole spec. Cell failures are recorded in the manifest and do
/// not stop other cells; errors returned here are setup or I/O problems
/// with the output directory itself.
pub fn run_spec(spec: &ExperimentSpec, opts: &RunOptions) -> Result<SpecOutcome> {
    spec.validate()?;
    let out_dir = opts.output.clone().unwrap_or_else(|| spec.output.clone());
    let raw_dir = out_dir.join(RAW_DIR);
    std::fs::create_dir_all(&raw_dir)?;
    for entry in std::fs::read_dir(&raw_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            std::fs::remove_file(path)?;
        }
    }
    std::fs::write(out_dir.join(SPEC_FILE), dump_spec(spec)?)?;

    let cells: Vec<(&AlgorithmSpec, u64)> = spec
        .algorithms
        .iter()
        .flat_map(|a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| VpoError::Resource(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(a, s)| execute_cell(spec, a, s, &raw_dir))
            .collect()
    });

    let mut rows = Vec::new();
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        rows.extend(r.rows);
        reports.push(r.report);
    }
    let aggregated = aggregate(&rows)?;
    write_aggregate(BufWriter::new(File::create(out_dir.join(AGGREGATE_FILE))?), &aggregated)?;
    let manifest = Manifest {
        experiment: spec.name.clone(),
        kind: spec.kind,
        spec_file: SPEC_FILE.to_string(),
        aggregate_csv: AGGREGATE_FILE.to_string(),
        cells: reports,
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(SpecOutcome {
        out_dir,
        manifest,
        aggregate: aggregated,
    })
}

/// Re-aggregates the raw CSVs of an output directory, or of a directory of
/// raw CSVs, and writes `aggregate.csv` next to them.
pub fn aggregate_dir(dir: &Path) -> Result<Vec<AggregateRow>> {
    let raw = dir.join(RAW_DIR);
    let source = if raw.is_dir() { raw } else { dir.to_path_buf() };
    let rows = read_raw_dir(&source)?;
    if rows.is_empty() {
        return Err(VpoError::Config(format!("no raw CSV rows under {}", source.display())));
    }
    let aggregated = aggregate(&rows)?;
    write_aggregate(BufWriter::new(File::create(dir.join(AGGREGATE_FILE))?), &aggregated)?;
    Ok(aggregated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment_io::parse_spec;

    fn tiny(kind: &str, extra: &str) -> ExperimentSpec {
        let text = format!(
            "kind = \"{kind}\"\nseeds = [0, 1]\n{extra}\n[[algorithm]]\nid = \"mle\"\nalpha = 0.0\n[[algorithm]]\nid = \"vpo\"\nalpha = 0.5\n"
        );
        parse_spec(&text).unwrap().spec
    }

    #[test]
    fn online_cells_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny("online-mab", "arm_count = 4\niterations = 6\ninner_steps = 2");
        let opts = RunOptions {
            jobs: 2,
            output: Some(dir.path().to_path_buf()),
        };
        let out = run_spec(&spec, &opts).unwrap();
        assert!(out.manifest.all_succeeded());
        assert_eq!(out.manifest.cells.len(), 4);
        let raw: Vec<_> = std::fs::read_dir(dir.path().join(RAW_DIR)).unwrap().collect();
        assert_eq!(raw.len(), 4);
        // 6 iterations × 3 metrics × 2 algorithms.
        assert_eq!(out.aggregate.len(), 36);
        assert!(out.aggregate.iter().all(|r| r.n == 2));

        let first = std::fs::read(dir.path().join(RAW_DIR).join(raw_file_name("vpo", 1))).unwrap();
        let rerun = run_spec(&spec, &RunOptions { jobs: 1, ..opts.clone() }).unwrap();
        let second = std::fs::read(dir.path().join(RAW_DIR).join(raw_file_name("vpo", 1))).unwrap();
        assert_eq!(first, second);

        let again = aggregate_dir(dir.path()).unwrap();
        assert_eq!(again, out.aggregate);
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest, rerun.manifest);
        let dumped = std::fs::read_to_string(dir.path().join(SPEC_FILE)).unwrap();
        assert_eq!(parse_spec(&dumped).unwrap().spec, spec);
    }

    #[test]
    fn offline_rows_keyed_by_dataset_size() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny("offline-mab", "arm_count = 3\ndataset_sizes = [5, 20]\ntotal_steps = 30");
        let out = run_spec(
            &spec,
            &RunOptions {
                jobs: 1,
                output: Some(dir.path().to_path_buf()),
            },
        )
        .unwrap();
        let xs: Vec<u64> = out
            .aggregate
            .iter()
            .filter(|r| r.metric_name == "suboptimality_gap" && r.algorithm == "mle")
            .map(|r| r.x)
            .collect();
        assert_eq!(xs, vec![5, 20]);
    }

    #[test]
    fn aggregate_dir_needs_rows() {
        let dir = tempfile::tempdir().unwrap();
        assert!(aggregate_dir(dir.path()).is_err());
    }
}
