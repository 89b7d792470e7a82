use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use vvcv::bench::MethodSettings;

use crate::error::CliError;

/// A score family the command line can build without user code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSpec {
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, variances: Vec<f64> },
    /// Independent Gaussian coordinates read from a CSV file with a
    /// `mean,variance` header and one row per coordinate.
    ProductGaussian { table: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub dim: usize,
    /// One CSV per task with header `x_1,…,x_d,f`.
    pub files: Vec<PathBuf>,
    pub scores: Vec<ScoreSpec>,
}

/// The configuration document shared by `bench` and `fit`. Command-line
/// flags take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<String>,
    /// Variance of the second target in the `south` problem.
    pub sigma2: Option<f64>,
    pub methods: Option<Vec<String>>,
    pub m: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub trace: Option<bool>,
    pub out: Option<PathBuf>,
    /// Overrides merged onto the default method settings.
    pub settings: Option<Table>,
    pub fit: Option<FitSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The document as written to `resolved.toml`, and a SHA-256 digest of
    /// everything in it except the output directory.
    pub fn render(&self) -> Result<(String, String), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        let keyed = RunConfig {
            out: None,
            ..self.clone()
        };
        let canonical = toml::to_string(&keyed).map_err(|e| CliError::Config(e.to_string()))?;
        Ok((text, hex::encode(Sha256::digest(canonical.as_bytes()))))
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Applies `overrides` on top of `defaults`. Unknown keys are rejected.
pub fn resolve_settings(defaults: &MethodSettings, overrides: Option<&Table>) -> Result<MethodSettings, CliError> {
    let mut table = Table::try_from(defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(o) = overrides {
        merge(&mut table, o);
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("settings: {e}")))
}

/// Settings as a table, for writing a fully resolved config.
pub fn settings_table(s: &MethodSettings) -> Result<Table, CliError> {
    Table::try_from(s).map_err(|e| CliError::Config(e.to_string()))
}

/// Parses `40,40` or `60:20`.
pub fn parse_m(s: &str) -> Result<Vec<usize>, CliError> {
    s.split([',', ':'])
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("cannot read sample sizes '{s}'")))
        })
        .collect()
}
