use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;
use vvcv::bench::{
    check_method, problem_by_name, run_method, summarize, write_raw, write_summary, write_trace, Method, RunSpec,
};

use crate::config::{parse_m, resolve_settings, settings_table, RunConfig};
use crate::error::CliError;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Problem to run: step, south or borehole.
    pub problem: Option<String>,
    /// Per-task sample sizes, e.g. `40,40` or `60:20`.
    #[arg(long)]
    pub m: Option<String>,
    /// Repetitions per method (default 20).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Run seed; each repetition derives its own from it (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated methods: mc, cv, cf, vvcv-fixedb, vvcv-estb, vvcv-convexb.
    #[arg(long)]
    pub methods: Option<String>,
    /// Output directory (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write per-epoch estimates of the stochastic methods.
    #[arg(long)]
    pub trace: bool,
    /// Variance of the second target of the `south` problem.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Write zero for every wall-clock time, making output byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

pub const DEFAULT_REPS: usize = 20;

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let name = args
        .problem
        .clone()
        .or(cfg.problem.clone())
        .ok_or_else(|| CliError::Config("no problem given; expected step, south or borehole".into()))?;
    let sigma2 = args.sigma2.or(cfg.sigma2);
    let problem = problem_by_name(&name, sigma2)?;
    for w in &problem.warnings {
        eprintln!("warning: {w}");
    }
    let m = match &args.m {
        Some(s) => parse_m(s)?,
        None => cfg.m.clone().unwrap_or_else(|| problem.default_m.clone()),
    };
    if m.len() != problem.n_tasks() {
        return Err(CliError::Config(format!(
            "{} needs {} sample sizes, got {}",
            problem.name,
            problem.n_tasks(),
            m.len()
        )));
    }
    let method_names: Vec<String> = match &args.methods {
        Some(s) => s.split(',').map(str::to_string).collect(),
        None => cfg.methods.clone().unwrap_or_else(|| {
            Method::ALL
                .iter()
                .filter(|m| **m != Method::VvConvexB || problem.shared_target())
                .map(|m| m.name().to_string())
                .collect()
        }),
    };
    let methods = method_names
        .iter()
        .map(|s| s.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    let reps = args.reps.or(cfg.reps).unwrap_or(DEFAULT_REPS);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let trace = args.trace || cfg.trace.unwrap_or(false);
    let out = args.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut settings = resolve_settings(&problem.defaults(&m), cfg.settings.as_ref())?;
    if args.no_timing {
        settings.timing = false;
    }
    for &method in &methods {
        check_method(&problem, method, &settings)?;
    }

    let resolved = RunConfig {
        problem: Some(name),
        sigma2: if problem.name == "south" { sigma2.or(Some(1.25)) } else { None },
        methods: Some(methods.iter().map(|m| m.name().to_string()).collect()),
        m: Some(m.clone()),
        reps: Some(reps),
        seed: Some(seed),
        trace: Some(trace),
        out: Some(out.clone()),
        settings: Some(settings_table(&settings)?),
        fit: None,
    };
    let (text, digest) = resolved.render()?;
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("resolved.toml"), text.as_bytes())?;
    write_file(&out.join("digest.txt"), format!("{digest}\n").as_bytes())?;

    let mut records = Vec::new();
    let mut traces = Vec::new();
    for &method in &methods {
        let spec = RunSpec {
            problem: &problem,
            method,
            m: m.clone(),
            reps,
            seed,
            settings: &settings,
            trace,
            config_digest: digest.clone(),
        };
        let run = run_method(&spec)?;
        for r in run.records.iter().filter(|r| r.error.is_some()) {
            eprintln!("warning: {method} rep {} failed: {}", r.rep, r.error.as_deref().unwrap_or(""));
        }
        records.extend(run.records);
        traces.extend(run.traces);
    }
    let summary = summarize(&records)?;
    write_raw(&records, create(&out.join("raw.csv"))?)?;
    write_summary(&summary, create(&out.join("summary.csv"))?)?;
    if trace {
        write_trace(&traces, create(&out.join("trace.csv"))?)?;
    }
    for row in &summary {
        println!(
            "{:<13} task {}  mean abs err {:.6}  ({} reps)",
            row.method.name(),
            row.task,
            row.mean_abs_err,
            row.reps
        );
    }
    println!("config digest {digest}");
    Ok(())
}

fn create(path: &std::path::Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}
