//! Per-method settings for a benchmark run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::BaseKernel;
use crate::solvers::OptimConfig;
use crate::stein::TaskCovariance;
use crate::tuning::TuneConfig;

/// Everything a method runner needs beyond the problem and the data.
///
/// Seeds in `cv`, `vv` and the tuning configs are mixed with each
/// repetition's seed, so repetitions differ while staying reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    /// Base kernel before tuning.
    pub kernel: BaseKernel,
    /// Master switch for both tuning configs below.
    pub tune: bool,
    /// Tuning for the single-task methods; each task is tuned on its own.
    pub tune_scalar: Option<TuneConfig>,
    /// Tuning for the vector-valued methods; one hyperparameter set shared by
    /// all tasks.
    pub tune_vv: Option<TuneConfig>,
    /// Minibatch settings for the single-task stochastic fit.
    pub cv: OptimConfig,
    /// Minibatch settings for the vector-valued stochastic fits.
    pub vv: OptimConfig,
    /// Row-major task covariance for the fixed-covariance fit.
    pub fixed_b: Vec<f64>,
    /// Row-major starting covariance for the learned-covariance fit.
    pub b0: Vec<f64>,
    pub cf_lambda: f64,
    pub convex_ladder: Vec<f64>,
    pub convex_lambda: f64,
    /// Record wall-clock seconds. When off every time is written as zero, so
    /// output files are byte-identical across runs.
    pub timing: bool,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            kernel: BaseKernel::SquaredExponential { lambda: 1.0 },
            tune: true,
            tune_scalar: None,
            tune_vv: None,
            cv: OptimConfig::default(),
            vv: OptimConfig::default(),
            fixed_b: vec![1.0, 0.0, 0.0, 1.0],
            b0: vec![1.0, 0.0, 0.0, 1.0],
            cf_lambda: 1e-5,
            convex_ladder: vec![1e-1, 1e-2, 1e-3],
            convex_lambda: 1e-5,
            timing: true,
        }
    }
}

impl MethodSettings {
    pub fn scalar_tuning(&self) -> Option<&TuneConfig> {
        self.tune_scalar.as_ref().filter(|_| self.tune)
    }

    pub fn vv_tuning(&self) -> Option<&TuneConfig> {
        self.tune_vv.as_ref().filter(|_| self.tune)
    }

    pub fn fixed_cov(&self, t: usize) -> Result<TaskCovariance> {
        cov_from(&self.fixed_b, t, "fixed_b")
    }

    pub fn initial_cov(&self, t: usize) -> Result<TaskCovariance> {
        cov_from(&self.b0, t, "b0")
    }

    /// Checks everything that can be checked before any data exist.
    pub fn validate(&self, t: usize) -> Result<()> {
        self.kernel.validate()?;
        self.cv.validate()?;
        self.vv.validate()?;
        self.fixed_cov(t)?;
        self.initial_cov(t)?;
        for (name, v) in [("cf_lambda", self.cf_lambda), ("convex_lambda", self.convex_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn cov_from(v: &[f64], t: usize, name: &str) -> Result<TaskCovariance> {
    if v.len() != t * t {
        return Err(Error::InvalidArgument(format!(
            "{name} needs {} entries for {t} tasks, got {}",
            t * t,
            v.len()
        )));
    }
    TaskCovariance::from_rows(t, v)
}
