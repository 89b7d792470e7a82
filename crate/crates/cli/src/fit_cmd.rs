use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};
use vvcv::bench::{fit_method, Method, MethodSettings};
use vvcv::bench::report::fmt_f64;
use vvcv::types::{gaussian_score, Dataset, Point, ScoreFn};

use crate::bench_cmd::write_file;
use crate::config::{resolve_settings, settings_table, FitSection, RunConfig, ScoreSpec};
use crate::error::CliError;

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Configuration file with a `[fit]` section.
    #[arg(long)]
    pub config: PathBuf,
    /// Method to fit; defaults to the first entry of `methods` in the file.
    #[arg(long)]
    pub method: Option<String>,
    /// Output directory (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the stochastic solvers (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct ModelSummary {
    method: String,
    estimates: Vec<f64>,
    theta_len: usize,
    theta_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<f64>>>,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_table(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let num = |j: usize| -> Result<f64, CliError> {
            row.get(j)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Config(format!("{} line {}: expected mean,variance", path.display(), i + 2)))
        };
        mean.push(num(0)?);
        var.push(num(1)?);
    }
    Ok((mean, var))
}

fn build_score(spec: &ScoreSpec, base: &Path) -> Result<ScoreFn, CliError> {
    Ok(match spec {
        ScoreSpec::Gaussian { mean, variances } => gaussian_score(mean, variances)?,
        ScoreSpec::ProductGaussian { table } => {
            let (m, v) = read_table(&resolve_path(base, table))?;
            gaussian_score(&m, &v)?
        }
    })
}

/// Reads `x_1,…,x_d,f` rows, reporting the 1-based line of any bad row.
pub fn read_samples(path: &Path, dim: usize) -> Result<(Vec<Point>, Vec<f64>), CliError> {
    let mut rd = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = rd
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .clone();
    if header.len() != dim + 1 {
        return Err(CliError::Config(format!(
            "{} line 1: header has {} columns, expected x_1..x_{dim},f",
            path.display(),
            header.len()
        )));
    }
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != dim + 1 {
            return Err(CliError::Config(format!(
                "{} line {line}: {} fields, expected {}",
                path.display(),
                row.len(),
                dim + 1
            )));
        }
        let nums: Result<Vec<f64>, _> = row.iter().map(|v| v.trim().parse::<f64>()).collect();
        let nums = nums.map_err(|_| CliError::Config(format!("{} line {line}: not a number", path.display())))?;
        vals.push(nums[dim]);
        pts.push(nums[..dim].to_vec());
    }
    if pts.is_empty() {
        return Err(CliError::Config(format!("{}: no samples", path.display())));
    }
    Ok((pts, vals))
}

fn identity(t: usize) -> Vec<f64> {
    (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect()
}

pub fn run(args: FitArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let fit: FitSection = cfg
        .fit
        .clone()
        .ok_or_else(|| CliError::Config("the configuration has no [fit] section".into()))?;
    if fit.files.is_empty() || fit.files.len() != fit.scores.len() {
        return Err(CliError::Config(format!(
            "[fit] needs one score per file, got {} files and {} scores",
            fit.files.len(),
            fit.scores.len()
        )));
    }
    let method_name = args
        .method
        .clone()
        .or_else(|| cfg.methods.as_ref().and_then(|m| m.first().cloned()))
        .ok_or_else(|| CliError::Config("no method given".into()))?;
    let method: Method = method_name.parse()?;
    let t = fit.files.len();
    if method == Method::VvConvexB && fit.scores.iter().any(|s| s != &fit.scores[0]) {
        return Err(CliError::Config(format!("{method} needs every task to use the same score")));
    }
    let scores = fit
        .scores
        .iter()
        .map(|s| build_score(s, &base_dir))
        .collect::<Result<Vec<_>, _>>()?;
    let mut points = Vec::with_capacity(t);
    let mut values = Vec::with_capacity(t);
    for f in &fit.files {
        let (p, v) = read_samples(&resolve_path(&base_dir, f), fit.dim)?;
        points.push(p);
        values.push(v);
    }
    let data = Dataset::from_parts(points, values, scores)?;

    let defaults = MethodSettings {
        fixed_b: identity(t),
        b0: identity(t),
        ..MethodSettings::default()
    };
    let settings = resolve_settings(&defaults, cfg.settings.as_ref())?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = args.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));

    let resolved = RunConfig {
        methods: Some(vec![method.name().to_string()]),
        seed: Some(seed),
        out: Some(out.clone()),
        settings: Some(settings_table(&settings)?),
        fit: Some(fit),
        ..RunConfig::default()
    };
    let (text, digest) = resolved.render()?;

    let outcome = fit_method(method, &data, &settings, seed)?;
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("resolved.toml"), text.as_bytes())?;
    write_file(&out.join("digest.txt"), format!("{digest}\n").as_bytes())?;

    let mut est = String::from("task,estimate\n");
    for (i, e) in outcome.estimates.iter().enumerate() {
        est.push_str(&format!("{i},{}\n", fmt_f64(*e)));
    }
    write_file(&out.join("estimates.csv"), est.as_bytes())?;

    let mut hasher = Sha256::new();
    for v in &outcome.theta {
        hasher.update(v.to_le_bytes());
    }
    let summary = ModelSummary {
        method: method.name().to_string(),
        estimates: outcome.estimates.clone(),
        theta_len: outcome.theta.len(),
        theta_sha256: hex::encode(hasher.finalize()),
        b: outcome
            .cov
            .as_ref()
            .map(|c| (0..t).map(|i| (0..t).map(|j| c.b()[(i, j)]).collect()).collect()),
    };
    let model = toml::to_string(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("model.toml"), model.as_bytes())?;
    for (i, e) in outcome.estimates.iter().enumerate() {
        println!("task {i}: {e:.10}");
    }
    Ok(())
}
