//! Raw per-run metric rows and their cross-seed aggregation.
//!
//! Raw CSV columns: `experiment,algorithm,alpha,seed,x,metric_name,metric_value`.
//! Aggregate CSV columns: `experiment,algorithm,alpha,x,metric_name,mean,stderr,n`.
//! Floats are written with 17 significant digits; lines end in LF.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::MetricsTrace;
use crate::error::{Result, VpoError};

pub const RAW_HEADER: [&str; 7] = ["experiment", "algorithm", "alpha", "seed", "x", "metric_name", "metric_value"];
pub const AGGREGATE_HEADER: [&str; 8] = ["experiment", "algorithm", "alpha", "x", "metric_name", "mean", "stderr", "n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub experiment: String,
    pub algorithm: String,
    pub alpha: f64,
    pub seed: u64,
    pub x: u64,
    pub metric_name: String,
    pub metric_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub algorithm: String,
    pub alpha: f64,
    pub x: u64,
    pub metric_name: String,
    pub mean: f64,
    /// Sample standard deviation over `√n`; zero for a single seed.
    pub stderr: f64,
    pub n: usize,
}

/// Full-precision float text: 17 significant digits in scientific form.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(e: csv::Error) -> VpoError {
    VpoError::Config(format!("csv: {e}"))
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Rows for one run, in record order. Each checkpoint emits the headline
/// metric, then the per-iteration regret (online), the training loss, and
/// the first-step loss (offline).
pub fn trace_rows(experiment: &str, algorithm: &str, alpha: f64, seed: u64, trace: &MetricsTrace<f64>) -> Vec<RawRow> {
    let row = |x: u64, name: &str, value: f64| RawRow {
        experiment: experiment.to_string(),
        algorithm: algorithm.to_string(),
        alpha,
        seed,
        x,
        metric_name: name.to_string(),
        metric_value: value,
    };
    let mut rows = Vec::new();
    for r in &trace.records {
        rows.push(row(r.x, trace.kind.name(), r.metric));
        if let Some(v) = r.instantaneous {
            rows.push(row(r.x, "instantaneous_regret", v));
        }
        rows.push(row(r.x, "loss", r.loss));
        if let Some(v) = r.first_loss {
            rows.push(row(r.x, "first_loss", v));
        }
    }
    rows
}

/// Writes rows sorted stably by `(algorithm, seed, x)`.
pub fn write_raw<W: Write>(out: W, rows: &[RawRow]) -> Result<()> {
    let mut sorted: Vec<&RawRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.algorithm, a.seed, a.x).cmp(&(&b.algorithm, b.seed, b.x)));
    let mut w = writer(out);
    w.write_record(RAW_HEADER).map_err(csv_error)?;
    for r in sorted {
        w.write_record([
            r.experiment.as_str(),
            r.algorithm.as_str(),
            &format_float(r.alpha),
            &r.seed.to_string(),
            &r.x.to_string(),
            r.metric_name.as_str(),
            &format_float(r.metric_value),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(VpoError::Config(format!(
            "unexpected CSV header {:?}, expected {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(())
}

pub fn read_raw<R: Read>(input: R) -> Result<Vec<RawRow>> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &RAW_HEADER)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

pub fn read_raw_file(path: &Path) -> Result<Vec<RawRow>> {
    read_raw(std::fs::File::open(path)?)
}

/// Mean and standard error per `(experiment, algorithm, x, metric_name)`,
/// sorted by `(experiment, algorithm, x, metric_name)`.
///
/// Values are summed in seed order, so any permutation of the input gives
/// bit-identical output. Non-finite values are dropped; a group left
/// without values is skipped with a warning.
pub fn aggregate(rows: &[RawRow]) -> Result<Vec<AggregateRow>> {
    type Key<'a> = (&'a str, &'a str, u64, &'a str);
    let mut groups: BTreeMap<Key<'_>, (f64, BTreeMap<u64, f64>)> = BTreeMap::new();
    for r in rows {
        let key = (r.experiment.as_str(), r.algorithm.as_str(), r.x, r.metric_name.as_str());
        let (alpha, values) = groups.entry(key).or_insert_with(|| (r.alpha, BTreeMap::new()));
        if alpha.to_bits() != r.alpha.to_bits() {
            return Err(VpoError::Config(format!(
                "algorithm {:?} appears with alpha {} and {}",
                r.algorithm, alpha, r.alpha
            )));
        }
        if values.insert(r.seed, r.metric_value).is_some() {
            return Err(VpoError::Config(format!(
                "duplicate row for {:?} seed {} x {} metric {:?}",
                r.algorithm, r.seed, r.x, r.metric_name
            )));
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((experiment, algorithm, x, metric_name), (alpha, values)) in groups {
        let finite: Vec<f64> = values.values().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            log::warn!("skipping {algorithm} x={x} {metric_name}: no finite values");
            continue;
        }
        let n = finite.len();
        let mean = finite.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        out.push(AggregateRow {
            experiment: experiment.to_string(),
            algorithm: algorithm.to_string(),
            alpha,
            x,
            metric_name: metric_name.to_string(),
            mean,
            stderr,
            n,
        });
    }
    Ok(out)
}

pub fn write_aggregate<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(AGGREGATE_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.experiment.as_str(),
            r.algorithm.as_str(),
            &format_float(r.alpha),
            &r.x.to_string(),
            r.metric_name.as_str(),
            &format_float(r.mean),
            &format_float(r.stderr),
            &r.n.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate<R: Read>(input: R) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &AGGREGATE_HEADER)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

/// Reads every `*.csv` in `dir` (sorted by file name) as raw rows.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<RawRow>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_raw_file(&p).map_err(|e| VpoError::Config(format!("{}: {e}", p.display())))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{MetricKind, TraceRecord};
    use proptest::prelude::*;

    fn row(algorithm: &str, seed: u64, x: u64, value: f64) -> RawRow {
        RawRow {
            experiment: "e".into(),
            algorithm: algorithm.into(),
            alpha: 0.5,
            seed,
            x,
            metric_name: "m".into(),
            metric_value: value,
        }
    }

    #[test]
    fn mean_and_stderr_by_hand() {
        let agg = aggregate(&[row("a", 0, 1, 1.0), row("a", 1, 1, 3.0)]).unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!((agg[0].mean, agg[0].stderr, agg[0].n), (2.0, 1.0, 2));
        let single = aggregate(&[row("a", 4, 1, 7.5)]).unwrap();
        assert_eq!((single[0].mean, single[0].stderr, single[0].n), (7.5, 0.0, 1));
    }

    #[test]
    fn groups_and_sorts() {
        let rows = vec![row("b", 0, 2, 1.0), row("a", 0, 10, 2.0), row("a", 0, 2, 3.0)];
        let agg = aggregate(&rows).unwrap();
        let keys: Vec<_> = agg.iter().map(|r| (r.algorithm.as_str(), r.x)).collect();
        assert_eq!(keys, vec![("a", 2), ("a", 10), ("b", 2)]);
    }

    #[test]
    fn rejects_duplicates_and_skips_empty_groups() {
        assert!(aggregate(&[row("a", 0, 1, 1.0), row("a", 0, 1, 2.0)]).is_err());
        let mut other_alpha = row("a", 1, 1, 1.0);
        other_alpha.alpha = 0.6;
        assert!(aggregate(&[row("a", 0, 1, 1.0), other_alpha]).is_err());
        let agg = aggregate(&[row("a", 0, 1, f64::NAN), row("a", 0, 2, 1.0)]).unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].x, 2);
    }

    #[test]
    fn raw_round_trip_is_lossless() {
        let rows = vec![row("a", 0, 1, 0.1 + 0.2), row("a", 0, 2, -1.0e-300), row("a", 1, 1, 12345.678901234567)];
        let mut buf = Vec::new();
        write_raw(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("experiment,algorithm,alpha,seed,x,metric_name,metric_value\n"));
        assert!(!text.contains('\r'));
        assert!(text.contains("3.0000000000000004e-1"));
        assert_eq!(read_raw(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn raw_sort_is_stable() {
        let mut a = row("a", 0, 1, 1.0);
        a.metric_name = "z".into();
        let b = row("a", 0, 1, 2.0);
        let mut buf = Vec::new();
        write_raw(&mut buf, &[row("b", 0, 0, 0.0), a.clone(), b.clone()]).unwrap();
        let back = read_raw(buf.as_slice()).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }

    #[test]
    fn aggregate_round_trip_and_header_check() {
        let agg = aggregate(&[row("a", 0, 1, 1.0), row("a", 1, 1, 2.0)]).unwrap();
        let mut buf = Vec::new();
        write_aggregate(&mut buf, &agg).unwrap();
        assert_eq!(read_aggregate(buf.as_slice()).unwrap(), agg);
        assert!(read_raw(buf.as_slice()).is_err());
        assert!(read_aggregate(&b"a,b\n1,2\n"[..]).is_err());
    }

    #[test]
    fn trace_rows_layout() {
        let mut trace = MetricsTrace::new(MetricKind::CumulativeRegret);
        trace.records.push(TraceRecord {
            x: 1,
            metric: 0.5,
            instantaneous: Some(0.5),
            loss: 2.0,
            first_loss: None,
        });
        let rows = trace_rows("e", "a", 0.1, 3, &trace);
        let names: Vec<_> = rows.iter().map(|r| r.metric_name.as_str()).collect();
        assert_eq!(names, vec!["cumulative_regret", "instantaneous_regret", "loss"]);
        assert!(rows.iter().all(|r| r.seed == 3 && r.x == 1 && r.alpha == 0.1));
    }

    proptest! {
        #[test]
        fn aggregate_is_order_independent(
            values in proptest::collection::vec(-1e3f64..1e3, 1..30),
            shuffle_seed in any::<u64>(),
        ) {
            let rows: Vec<RawRow> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| row(if i % 3 == 0 { "a" } else { "b" }, (i / 6) as u64, (i % 6) as u64, v))
                .collect();
            let mut shuffled = rows.clone();
            let mut rng = crate::numerics::SeededRng::new(shuffle_seed, 0);
            for i in (1..shuffled.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            let a = aggregate(&rows).unwrap();
            let b = aggregate(&shuffled).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.mean.to_bits(), y.mean.to_bits());
                prop_assert_eq!(x.stderr.to_bits(), y.stderr.to_bits());
                prop_assert!(x.stderr >= 0.0 && x.n >= 1);
            }
        }
    }
}
