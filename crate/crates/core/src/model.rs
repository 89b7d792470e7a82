//! The fitted control variate and the objectives it is trained against.
//!
//! A model is `g_θ(x) = Σ_b K₀(x, x_b) θ_b` over anchor points `x_b`, with
//! one coefficient vector `θ_b ∈ ℝ^T` per anchor, plus per-task offsets
//! `β`. The empirical objective is the sum of per-task residual variances
//!
//! ```text
//! Σ_t (1/m_t) Σ_j (f_t(x_tj) − g_θ(x_tj)_t − β_t)² + λ‖g_θ‖²
//! ```
//!
//! where the ridge is either the RKHS norm `θᵀ G θ` or the Euclidean `‖θ‖²`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::stein::{SteinKernel, TaskCovariance, UnitGram};
use crate::types::{Dataset, Point, TaskScores};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RidgeNorm {
    /// `‖g_θ‖²` in the RKHS of `K₀`, i.e. `θᵀ G θ`.
    Rkhs,
    /// `‖θ‖²₂`, the cheap choice for stochastic fitting.
    Euclidean,
}

#[derive(Clone, Debug)]
pub struct VvcvModel {
    kernel: SteinKernel,
    anchors: Vec<Point>,
    anchor_scores: Vec<TaskScores>,
    /// Anchor-major: `theta[b * T + t]`.
    theta: Vec<f64>,
    beta: Vec<f64>,
    lambda: f64,
}

impl VvcvModel {
    pub fn new(
        kernel: SteinKernel,
        anchors: &Dataset,
        theta: Vec<f64>,
        beta: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let scores = anchors.scores()?.to_vec();
        Self::from_parts(kernel, anchors.points().to_vec(), scores, theta, beta, lambda)
    }

    pub fn from_parts(
        kernel: SteinKernel,
        anchors: Vec<Point>,
        anchor_scores: Vec<TaskScores>,
        theta: Vec<f64>,
        beta: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let t = kernel.n_tasks();
        if theta.len() != anchors.len() * t {
            return Err(Error::DimensionMismatch {
                expected: anchors.len() * t,
                got: theta.len(),
            });
        }
        if beta.len() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                got: beta.len(),
            });
        }
        if anchor_scores.len() != anchors.len() {
            return Err(Error::DimensionMismatch {
                expected: anchors.len(),
                got: anchor_scores.len(),
            });
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge weight must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(Self {
            kernel,
            anchors,
            anchor_scores,
            theta,
            beta,
            lambda,
        })
    }

    /// `θ = 0` and `β` at the per-task sample means: no control variate.
    pub fn zero(kernel: SteinKernel, data: &Dataset, lambda: f64) -> Result<Self> {
        let t = kernel.n_tasks();
        let beta = data.mc_means();
        if beta.len() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                got: beta.len(),
            });
        }
        Self::new(kernel, data, vec![0.0; data.len() * t], beta, lambda)
    }

    pub fn kernel(&self) -> &SteinKernel {
        &self.kernel
    }

    pub fn anchors(&self) -> &[Point] {
        &self.anchors
    }

    pub fn anchor_scores(&self) -> &[TaskScores] {
        &self.anchor_scores
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_tasks(&self) -> usize {
        self.kernel.n_tasks()
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len(),
                got: beta.len(),
            });
        }
        self.beta = beta;
        Ok(self)
    }

    /// Same coefficients under a different task covariance.
    pub fn with_cov(mut self, cov: TaskCovariance) -> Result<Self> {
        self.kernel = self.kernel.with_cov(cov)?;
        Ok(self)
    }

    /// `g_θ(x) = Σ_b K₀(x, x_b) θ_b`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.n_tasks();
        let lx = self.kernel.scores_at(x)?;
        let b = self.kernel.cov().b();
        let mut blk = vec![0.0; t * t];
        let mut out = vec![0.0; t];
        for (i, (y, ly)) in self.anchors.iter().zip(&self.anchor_scores).enumerate() {
            self.kernel.fill_unit_block(x, y, &lx, ly, &mut blk)?;
            let th = &self.theta[i * t..(i + 1) * t];
            for a in 0..t {
                for c in 0..t {
                    out[a] += b[(a, c)] * blk[a * t + c] * th[c];
                }
            }
        }
        Ok(out)
    }

    /// Unit blocks between the dataset's points (rows) and the anchors.
    pub fn unit_gram_against(&self, data: &Dataset) -> Result<UnitGram> {
        let s = data.scores()?;
        let same = data.points() == self.anchors.as_slice();
        self.kernel
            .unit_gram_scored(data.points(), s, &self.anchors, &self.anchor_scores, same)
    }

    /// `(g_θ(x_a))_{t_a}` for every point `a` of the dataset.
    pub fn fitted(&self, data: &Dataset) -> Result<Vec<f64>> {
        let unit = self.unit_gram_against(data)?;
        Ok(fitted_values(&unit, self.kernel.cov().b(), &self.theta, data))
    }

    /// `θᵀ G θ`, the squared RKHS norm of `g_θ`.
    pub fn rkhs_norm_sq(&self) -> Result<f64> {
        let unit = self.kernel.unit_gram_scored(
            &self.anchors,
            &self.anchor_scores,
            &self.anchors,
            &self.anchor_scores,
            true,
        )?;
        Ok(rkhs_quadratic(&unit, self.kernel.cov().b(), &self.theta))
    }

    pub fn euclidean_norm_sq(&self) -> f64 {
        self.theta.iter().map(|v| v * v).sum()
    }

    pub fn ridge(&self, norm: RidgeNorm) -> Result<f64> {
        Ok(self.lambda
            * match norm {
                RidgeNorm::Rkhs => self.rkhs_norm_sq()?,
                RidgeNorm::Euclidean => self.euclidean_norm_sq(),
            })
    }
}

/// `(Σ_b K₀(x_a, x_b) θ_b)_{t_a}` for each row point `a` of `data`.
pub fn fitted_values(unit: &UnitGram, b: &DMatrix<f64>, theta: &[f64], data: &Dataset) -> Vec<f64> {
    let t = unit.n_tasks();
    (0..unit.rows())
        .into_par_iter()
        .map(|a| {
            let ta = data.task_of(a);
            let mut s = 0.0;
            for c in 0..unit.cols() {
                let blk = unit.block(a, c);
                for tp in 0..t {
                    s += b[(ta, tp)] * blk[ta * t + tp] * theta[c * t + tp];
                }
            }
            s
        })
        .collect()
}

/// `θᵀ (B ∘ C) θ` over a square unit Gram.
pub fn rkhs_quadratic(unit: &UnitGram, b: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let g = unit.apply(b);
    let th = DVector::from_column_slice(theta);
    th.dot(&(&g * &th))
}

/// Per-point residuals `f_a − g_a − β_{t_a}`.
pub fn residuals(data: &Dataset, fitted: &[f64], beta: &[f64]) -> Vec<f64> {
    data.values()
        .iter()
        .zip(fitted)
        .enumerate()
        .map(|(a, (f, g))| f - g - beta[data.task_of(a)])
        .collect()
}

/// `Σ_t (1/m_t) Σ_j r_tj²`.
pub fn variance_term(data: &Dataset, res: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..data.n_tasks() {
        let r = &res[data.task_range(t)];
        if r.is_empty() {
            return Err(Error::EmptyTask(t));
        }
        let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
        total += pairwise_sum(&sq) / r.len() as f64;
    }
    Ok(total)
}

fn check_tasks(model: &VvcvModel, data: &Dataset) -> Result<()> {
    if data.n_tasks() != model.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: model.n_tasks(),
            got: data.n_tasks(),
        });
    }
    if let Some(t) = (0..data.n_tasks()).find(|&t| data.task_len(t) == 0) {
        return Err(Error::EmptyTask(t));
    }
    Ok(())
}

/// Sum of per-task residual variances, optionally plus `λ‖g_θ‖²`.
pub fn objective_iid(
    model: &VvcvModel,
    data: &Dataset,
    include_ridge: bool,
    norm: RidgeNorm,
) -> Result<f64> {
    check_tasks(model, data)?;
    let g = model.fitted(data)?;
    let r = residuals(data, &g, model.beta());
    let v = variance_term(data, &r)?;
    Ok(if include_ridge { v + model.ridge(norm)? } else { v })
}

/// Lag-covariance correction for one chain of residuals:
/// `2 Σ_{s=1}^{m−1} (1/m) Σ_{i=1}^{m−s} c_i c_{i+s}` with `c` the residuals
/// centred by their own mean.
pub fn mcmc_correction(res: &[f64]) -> Result<f64> {
    let m = res.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "the chain-corrected objective needs at least 2 samples per task, got {m}"
        )));
    }
    let mean = pairwise_sum(res) / m as f64;
    let c: Vec<f64> = res.iter().map(|r| r - mean).collect();
    let lags: Vec<f64> = (1..m)
        .into_par_iter()
        .map(|s| {
            let prods: Vec<f64> = (0..m - s).map(|i| c[i] * c[i + s]).collect();
            pairwise_sum(&prods)
        })
        .collect();
    Ok(2.0 * pairwise_sum(&lags) / m as f64)
}

/// Residual variance plus the per-task lag-covariance correction, with each
/// task's points taken in chain order.
pub fn objective_mcmc(model: &VvcvModel, data: &Dataset) -> Result<f64> {
    check_tasks(model, data)?;
    let g = model.fitted(data)?;
    let r = residuals(data, &g, model.beta());
    let mut total = variance_term(data, &r)?;
    for t in 0..data.n_tasks() {
        total += mcmc_correction(&r[data.task_range(t)])?;
    }
    Ok(total)
}

/// The objective with a learned covariance: the model re-evaluated under
/// `cov`, its ridge, and the penalty `‖B‖²_F`.
pub fn objective_with_b(
    model: &VvcvModel,
    data: &Dataset,
    cov: &TaskCovariance,
    norm: RidgeNorm,
) -> Result<f64> {
    if cov.dim() != model.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: model.n_tasks(),
            got: cov.dim(),
        });
    }
    let m = model.clone().with_cov(cov.clone())?;
    Ok(objective_iid(&m, data, true, norm)? + cov.b().norm_squared())
}

/// `β*_t = mean_j (f_t(x_tj) − g_θ(x_tj)_t)`, the exact minimiser over `β`.
pub fn optimal_beta(model: &VvcvModel, data: &Dataset) -> Result<Vec<f64>> {
    check_tasks(model, data)?;
    let g = model.fitted(data)?;
    Ok(task_means(data, &g))
}

pub(crate) fn task_means(data: &Dataset, fitted: &[f64]) -> Vec<f64> {
    (0..data.n_tasks())
        .map(|t| {
            let r = data.task_range(t);
            let d: Vec<f64> = data.values()[r.clone()]
                .iter()
                .zip(&fitted[r])
                .map(|(f, g)| f - g)
                .collect();
            pairwise_sum(&d) / d.len() as f64
        })
        .collect()
}

/// Held-out estimator: per-task mean of `f_t − (g_θ)_t` on fresh points.
pub fn estimate_split(model: &VvcvModel, holdout: &Dataset) -> Result<Vec<f64>> {
    check_tasks(model, holdout)?;
    let mut out = Vec::with_capacity(holdout.n_tasks());
    let preds: Result<Vec<Vec<f64>>> = holdout.points().par_iter().map(|x| model.predict(x)).collect();
    let preds = preds?;
    for t in 0..holdout.n_tasks() {
        let d: Vec<f64> = holdout
            .task_range(t)
            .map(|a| holdout.values()[a] - preds[a][t])
            .collect();
        out.push(pairwise_sum(&d) / d.len() as f64);
    }
    Ok(out)
}

/// The all-data estimator: the fitted offsets `β`.
pub fn estimate_beta(model: &VvcvModel) -> Vec<f64> {
    model.beta().to_vec()
}
