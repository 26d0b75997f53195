//! Experiment specs, the cell runner, CSV emission and aggregation, and the
//! verification suites exposed by the command-line tool.

mod csv_io;
mod runner;
mod spec;
pub mod suites;

pub use csv_io::{
    aggregate, format_float, read_aggregate, read_raw, read_raw_dir, read_raw_file, trace_rows, write_aggregate,
    write_raw, AggregateRow, RawRow, AGGREGATE_HEADER, RAW_HEADER,
};
pub use runner::{
    aggregate_dir, raw_file_name, run_cell, run_spec, CellReport, CellStatus, Manifest, RunOptions, SpecOutcome,
    AGGREGATE_FILE, MANIFEST_FILE, RAW_DIR, SPEC_FILE,
};
pub use spec::{
    dump_spec, parse_spec, AlgorithmSpec, BehaviorSpec, ContextShape, ExperimentKind, ExperimentSpec, ParsedSpec,
    Schedule, DEFAULT_DATASET_SIZES, DEFAULT_EVAL_BATCH_SIZE, DEFAULT_SEED_COUNT,
};
