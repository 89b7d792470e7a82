//! Summaries and CSV output.
//!
//! Every floating-point field is written with 17 significant digits so a
//! value read back compares equal to the one written.

use std::io::Write;

use super::methods::{BenchRecord, Method, TraceRecord};
use crate::error::{Error, Result};

pub const RAW_HEADER: [&str; 9] = ["problem", "method", "m", "rep", "seed", "task", "estimate", "abs_err", "seconds"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "problem",
    "method",
    "m",
    "task",
    "mean_abs_err",
    "sd",
    "se",
    "mean_seconds",
    "reps",
];
pub const TRACE_HEADER: [&str; 9] = ["problem", "method", "m", "rep", "seed", "epoch", "task", "estimate", "abs_err"];

/// Full round-trip formatting.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sample sizes as `a:b:…`.
pub fn fmt_m(m: &[usize]) -> String {
    m.iter().map(usize::to_string).collect::<Vec<_>>().join(":")
}

/// One summary row per `(problem, method, m, task)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub problem: String,
    pub method: Method,
    pub m: Vec<usize>,
    pub task: usize,
    pub mean_abs_err: f64,
    /// Sample standard deviation; `None` with a single repetition.
    pub sd: Option<f64>,
    pub se: Option<f64>,
    pub mean_seconds: f64,
    /// Successful repetitions.
    pub reps: usize,
}

/// Groups records by `(problem, method, m)` in first-seen order and
/// summarises each task's absolute errors over the successful repetitions.
pub fn summarize(records: &[BenchRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to summarise".into()));
    }
    let mut keys: Vec<(String, Method, Vec<usize>)> = Vec::new();
    for r in records {
        let k = (r.problem.clone(), r.method, r.m.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (problem, method, m) in keys {
        let group: Vec<&BenchRecord> = records
            .iter()
            .filter(|r| r.problem == problem && r.method == method && r.m == m)
            .collect();
        let ok: Vec<Vec<f64>> = group.iter().filter_map(|r| r.abs_errors()).collect();
        let secs: Vec<f64> = group.iter().filter(|r| r.estimates.is_some()).map(|r| r.seconds).collect();
        let mean_seconds = if secs.is_empty() {
            f64::NAN
        } else {
            secs.iter().sum::<f64>() / secs.len() as f64
        };
        let t = group[0].truths.len();
        for task in 0..t {
            let e: Vec<f64> = ok.iter().map(|v| v[task]).collect();
            let n = e.len();
            let mean = if n == 0 { f64::NAN } else { e.iter().sum::<f64>() / n as f64 };
            let sd = (n > 1).then(|| (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            out.push(SummaryRow {
                problem: problem.clone(),
                method,
                m: m.clone(),
                task,
                mean_abs_err: mean,
                sd,
                se: sd.map(|s| s / (n as f64).sqrt()),
                mean_seconds,
                reps: n,
            });
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Raw per-repetition rows. Failed repetitions leave `estimate` and
/// `abs_err` empty.
pub fn write_raw<W: Write>(records: &[BenchRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RAW_HEADER).map_err(csv_err)?;
    for r in records {
        let errs = r.abs_errors();
        for task in 0..r.truths.len() {
            let (est, err) = match (&r.estimates, &errs) {
                (Some(e), Some(a)) => (fmt_f64(e[task]), fmt_f64(a[task])),
                _ => (String::new(), String::new()),
            };
            out.write_record([
                r.problem.clone(),
                r.method.to_string(),
                fmt_m(&r.m),
                r.rep.to_string(),
                r.seed.to_string(),
                task.to_string(),
                est,
                err,
                fmt_f64(r.seconds),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.problem.clone(),
            r.method.to_string(),
            fmt_m(&r.m),
            r.task.to_string(),
            fmt_f64(r.mean_abs_err),
            opt(r.sd),
            opt(r.se),
            fmt_f64(r.mean_seconds),
            r.reps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(rows: &[TraceRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.problem.clone(),
            r.method.to_string(),
            fmt_m(&r.m),
            r.rep.to_string(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.task.to_string(),
            fmt_f64(r.estimate),
            fmt_f64(r.abs_err),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
