//! Fitting the coefficients `(θ, β)` and, optionally, the task covariance.

pub mod adam;
pub mod convex;
pub mod exact;
pub mod sgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use convex::{fit_convex_b_ladder, ConvexReport, RungRecord};
pub use exact::{
    fit_exact_coordinate, fit_exact_euclidean, fit_exact_joint, rkhs_objective, solve_exact, CoordinateReport,
    ExactSolution, GramSystem,
};
pub use sgd::{covariance_gradient, fit_sgd_fixed_b, fit_sgd_learn_b};

/// Minibatch sizes, either given per task or as a total split in proportion
/// to the task sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSpec {
    PerTask(Vec<usize>),
    Total(usize),
}

impl BatchSpec {
    /// Resolves to one batch size per task. Proportional sizes are rounded
    /// and clipped to `[1, m_t]`.
    pub fn sizes(&self, m: &[usize]) -> Result<Vec<usize>> {
        match self {
            BatchSpec::PerTask(v) => {
                if v.len() != m.len() {
                    return Err(Error::DimensionMismatch {
                        expected: m.len(),
                        got: v.len(),
                    });
                }
                for (t, (&b, &mt)) in v.iter().zip(m).enumerate() {
                    if b == 0 || b > mt {
                        return Err(Error::InvalidArgument(format!(
                            "batch size {b} for task {t} must lie in [1, {mt}]"
                        )));
                    }
                }
                Ok(v.clone())
            }
            BatchSpec::Total(total) => {
                if *total == 0 {
                    return Err(Error::InvalidArgument("total batch size must be positive".into()));
                }
                let sum: usize = m.iter().sum();
                if sum == 0 {
                    return Err(Error::EmptyTask(0));
                }
                Ok(m.iter()
                    .map(|&mt| {
                        let share = (*total as f64 * mt as f64 / sum as f64).round() as usize;
                        share.clamp(1, mt.max(1))
                    })
                    .collect())
            }
        }
    }
}

/// Settings for the minibatch optimisers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch: BatchSpec,
    pub learning_rate: f64,
    /// Step size for the covariance factor; defaults to `learning_rate`.
    pub b_learning_rate: Option<f64>,
    pub epochs: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once the relative change of the full objective between epochs
    /// falls below this. Off unless set.
    pub early_stop_rel_tol: Option<f64>,
    /// Abort when the full objective exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch: BatchSpec::Total(10),
            learning_rate: 0.01,
            b_learning_rate: None,
            epochs: 100,
            lambda: 1e-5,
            adam: AdamConfig::default(),
            seed: 0,
            early_stop_rel_tol: None,
            divergence_factor: 1e6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        if let Some(r) = self.b_learning_rate {
            positive("b_learning_rate", r)?;
        }
        if let Some(r) = self.early_stop_rel_tol {
            positive("early_stop_rel_tol", r)?;
        }
        positive("divergence_factor", self.divergence_factor)?;
        positive("adam.eps", self.adam.eps)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// State after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-data objective.
    pub objective: f64,
    pub beta: Vec<f64>,
    /// Row-major task covariance, when it is being learned.
    pub b: Option<Vec<f64>>,
}

/// What a minibatch run did.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub initial_objective: f64,
    pub batch_sizes: Vec<usize>,
    pub trace: Vec<EpochRecord>,
}
