//! Closed-form fits.
//!
//! With the model convention `g_θ(x) = Σ_b K₀(x, x_b) θ_b`, only the entry
//! `θ_{a, t_a}` of each anchor's coefficient vector is needed at the optimum.
//! Writing `α_a` for it, the normal equations of the RKHS-ridge objective
//! reduce to the `N×N` system
//!
//! ```text
//! (G_s + λ D) α = f − E β,    G_s[a, b] = K₀(x_a, x_b)_{t_a t_b},  D = diag(m_{t_a})
//! ```
//!
//! whose solution also satisfies the full `(NT)×(NT)` system exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{objective_iid, RidgeNorm, VvcvModel};
use crate::stein::{SteinKernel, UnitGram};
use crate::types::Dataset;

/// The full normal-equation system `A θ = rhs` for fixed `β`.
#[derive(Clone, Debug)]
pub struct GramSystem {
    pub a: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Diagonal jitter added by the last factorisation, if any.
    pub jitter: f64,
}

impl GramSystem {
    /// `A = Σ_a (1/m_{t_a}) K₀(·, x_a)_{·t_a} K₀(x_a, ·)_{t_a·} + λ G` and
    /// `rhs = Σ_a (1/m_{t_a}) K₀(·, x_a)_{·t_a} (f_a − β_{t_a})`.
    pub fn assemble(kernel: &SteinKernel, data: &Dataset, beta: &[f64], lambda: f64) -> Result<Self> {
        check_beta(kernel, data, beta)?;
        let unit = kernel.unit_gram_dataset(data)?;
        let g = unit.apply(kernel.cov().b());
        let t = kernel.n_tasks();
        let n = data.len();
        // Φ: row a of G at output t_a, weighted rows in Φw
        let mut phi = DMatrix::zeros(n, n * t);
        let mut w = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for a in 0..n {
            let ta = data.task_of(a);
            phi.set_row(a, &g.row(a * t + ta));
            w[a] = 1.0 / data.task_len(ta) as f64;
            y[a] = data.values()[a] - beta[ta];
        }
        let phi_w = DMatrix::from_fn(n, n * t, |i, j| phi[(i, j)] * w[i]);
        let a_mat = phi.transpose() * &phi_w + &g * lambda;
        let rhs = phi_w.transpose() * y;
        Ok(Self {
            a: (&a_mat + a_mat.transpose()) * 0.5,
            rhs,
            jitter: 0.0,
        })
    }

    /// `‖A θ − rhs‖ / ‖rhs‖` (absolute when `rhs = 0`).
    pub fn relative_residual(&self, theta: &[f64]) -> f64 {
        let th = DVector::from_column_slice(theta);
        let r = (&self.a * th - &self.rhs).norm();
        let s = self.rhs.norm();
        if s > 0.0 {
            r / s
        } else {
            r
        }
    }

    /// Direct dense solve of the full system, for cross-checking.
    pub fn solve_dense(&mut self) -> Result<Vec<f64>> {
        let f = SpdFactor::new(&self.a)?;
        self.jitter = f.jitter;
        Ok(f.solve(&self.rhs).as_slice().to_vec())
    }
}

fn check_beta(kernel: &SteinKernel, data: &Dataset, beta: &[f64]) -> Result<()> {
    if beta.len() != kernel.n_tasks() || data.n_tasks() != kernel.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: kernel.n_tasks(),
            got: beta.len().min(data.n_tasks()),
        });
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "ridge weight must be finite and non-negative, got {lambda}"
        )))
    }
}

/// `G_s[a, b] = B_{t_a t_b} C(x_a, x_b)_{t_a t_b}`.
pub fn selected_gram(unit: &UnitGram, b: &DMatrix<f64>, data: &Dataset) -> DMatrix<f64> {
    let n = data.len();
    let tasks: Vec<usize> = (0..n).map(|a| data.task_of(a)).collect();
    let s = DMatrix::from_fn(n, n, |i, j| {
        let (ti, tj) = (tasks[i], tasks[j]);
        b[(ti, tj)] * unit.entry(i, j, ti, tj)
    });
    (&s + s.transpose()) * 0.5
}

/// `G_s + λ D`.
pub(crate) fn regularised(gs: &DMatrix<f64>, data: &Dataset, lambda: f64) -> DMatrix<f64> {
    let mut c = gs.clone();
    for a in 0..data.len() {
        c[(a, a)] += lambda * data.task_len(data.task_of(a)) as f64;
    }
    c
}

/// Expands the reduced coefficients `α` to the anchor-major `θ`.
pub fn expand_alpha(alpha: &DVector<f64>, data: &Dataset, t: usize) -> Vec<f64> {
    let mut theta = vec![0.0; data.len() * t];
    for a in 0..data.len() {
        theta[a * t + data.task_of(a)] = alpha[a];
    }
    theta
}

/// Result of a reduced solve.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub jitter: f64,
    pub pseudo_inverse: bool,
}

/// Minimises the RKHS-ridge objective over `θ` for fixed `β`.
pub fn solve_exact(kernel: &SteinKernel, data: &Dataset, beta: &[f64], lambda: f64) -> Result<ExactSolution> {
    check_beta(kernel, data, beta)?;
    check_lambda(lambda)?;
    let unit = kernel.unit_gram_dataset(data)?;
    let gs = selected_gram(&unit, kernel.cov().b(), data);
    let f = SpdFactor::new(&regularised(&gs, data, lambda))?;
    let y = DVector::from_fn(data.len(), |a, _| data.values()[a] - beta[data.task_of(a)]);
    let alpha = f.solve(&y);
    Ok(ExactSolution {
        theta: expand_alpha(&alpha, data, kernel.n_tasks()),
        alpha: alpha.as_slice().to_vec(),
        jitter: f.jitter,
        pseudo_inverse: f.is_pseudo_inverse(),
    })
}

/// Joint minimiser over `(α, β)` of the reduced problem with matrix
/// `C = M + λD`: `β = (EᵀC⁻¹E)⁻¹ EᵀC⁻¹ f` and `α = C⁻¹(f − Eβ)`.
pub(crate) fn joint_solve(c: &DMatrix<f64>, data: &Dataset) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = data.len();
    let t = data.n_tasks();
    let f = SpdFactor::new(c)?;
    let e = DMatrix::from_fn(n, t, |a, s| if data.task_of(a) == s { 1.0 } else { 0.0 });
    let y = DVector::from_column_slice(data.values());
    let cinv_e = f.solve_mat(&e);
    let cinv_y = f.solve(&y);
    let lhs = e.transpose() * &cinv_e;
    let rhs = e.transpose() * cinv_y;
    let beta = SpdFactor::new(&lhs)?.solve(&rhs);
    let resid = y - &e * &beta;
    let alpha = f.solve(&resid);
    Ok((alpha, beta.as_slice().to_vec()))
}

/// Exact joint minimiser over `(θ, β)` of the RKHS-ridge objective.
///
/// For one task this is the classical control functional estimator
/// `β = 1ᵀ(K + mλI)⁻¹f / 1ᵀ(K + mλI)⁻¹1`.
pub fn fit_exact_joint(kernel: &SteinKernel, data: &Dataset, lambda: f64) -> Result<VvcvModel> {
    check_lambda(lambda)?;
    if data.n_tasks() != kernel.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: kernel.n_tasks(),
            got: data.n_tasks(),
        });
    }
    let unit = kernel.unit_gram_dataset(data)?;
    let gs = selected_gram(&unit, kernel.cov().b(), data);
    let (alpha, beta) = joint_solve(&regularised(&gs, data, lambda), data)?;
    let theta = expand_alpha(&alpha, data, kernel.n_tasks());
    VvcvModel::new(kernel.clone(), data, theta, beta, lambda)
}

/// Exact joint minimiser over `(θ, β)` of the Euclidean-ridge objective
/// `Σ_t (1/m_t) Σ_j r² + λ‖θ‖²`, via `θ = Φᵀα` with `Φ = S G`.
pub fn fit_exact_euclidean(kernel: &SteinKernel, data: &Dataset, lambda: f64) -> Result<VvcvModel> {
    check_lambda(lambda)?;
    let unit = kernel.unit_gram_dataset(data)?;
    let t = kernel.n_tasks();
    let n = data.len();
    let b = kernel.cov().b();
    let phi = DMatrix::from_fn(n, n * t, |a, j| {
        let ta = data.task_of(a);
        let (c, tp) = (j / t, j % t);
        b[(ta, tp)] * unit.entry(a, c, ta, tp)
    });
    let m = &phi * phi.transpose();
    let (alpha, beta) = joint_solve(&regularised(&m, data, lambda), data)?;
    let theta = phi.transpose() * alpha;
    VvcvModel::new(kernel.clone(), data, theta.as_slice().to_vec(), beta, lambda)
}

/// Sweep-by-sweep record of block coordinate descent.
#[derive(Clone, Debug, Default)]
pub struct CoordinateReport {
    /// RKHS-ridge objective after each sweep.
    pub objectives: Vec<f64>,
    pub converged: bool,
}

/// Alternates an exact `θ` solve with the optimal `β`, starting from the
/// per-task sample means, until the relative objective change drops below
/// `1e-10` or `sweeps` is reached.
pub fn fit_exact_coordinate(
    kernel: &SteinKernel,
    data: &Dataset,
    lambda: f64,
    sweeps: usize,
) -> Result<(VvcvModel, CoordinateReport)> {
    if sweeps == 0 {
        return Err(Error::InvalidArgument("at least one sweep is required".into()));
    }
    check_lambda(lambda)?;
    let unit = kernel.unit_gram_dataset(data)?;
    let gs = selected_gram(&unit, kernel.cov().b(), data);
    let f = SpdFactor::new(&regularised(&gs, data, lambda))?;
    let n = data.len();
    let mut beta = data.mc_means();
    let mut report = CoordinateReport::default();
    let mut alpha = DVector::zeros(n);
    for _ in 0..sweeps {
        let y = DVector::from_fn(n, |a, _| data.values()[a] - beta[data.task_of(a)]);
        alpha = f.solve(&y);
        let g = &gs * &alpha;
        beta = crate::model::task_means(data, g.as_slice());
        let res: Vec<f64> = (0..n)
            .map(|a| data.values()[a] - g[a] - beta[data.task_of(a)])
            .collect();
        let obj = crate::model::variance_term(data, &res)? + lambda * alpha.dot(&g);
        let prev = report.objectives.last().copied();
        report.objectives.push(obj);
        if let Some(p) = prev {
            if (p - obj).abs() <= 1e-10 * p.abs().max(f64::MIN_POSITIVE) {
                report.converged = true;
                break;
            }
        }
    }
    let theta = expand_alpha(&alpha, data, kernel.n_tasks());
    let model = VvcvModel::new(kernel.clone(), data, theta, beta, lambda)?;
    Ok((model, report))
}

/// Objective of a model under the RKHS ridge; used for reporting.
pub fn rkhs_objective(model: &VvcvModel, data: &Dataset) -> Result<f64> {
    objective_iid(model, data, true, RidgeNorm::Rkhs)
}
