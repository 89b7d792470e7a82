//! Learning a shared-target task covariance through a convex surrogate.
//!
//! Writing `Φ = ΘB` for the effective coefficients, the surrogate
//!
//! ```text
//! J(Φ, β; I) + λ Tr[B⁻¹ (ΦᵀKΦ + δ²I)] + ‖B‖²_F
//! ```
//!
//! is jointly convex in `(Φ, β, B)`. For fixed `B` the minimiser over
//! `(Φ, β)` is the RKHS-ridge fit under the kernel `B k₀`, and for fixed `Φ`
//! the minimiser over `B` is `(λS/2)^{1/3}` with `S = ΦᵀKΦ + δ²I`. The two
//! steps alternate until the objective settles, and each value of `δ` on a
//! decreasing ladder is warm-started from the previous one.

use nalgebra::DMatrix;

use super::exact::{joint_solve, regularised};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, sym_apply, SpdFactor};
use crate::model::VvcvModel;
use crate::stein::{SteinForm, SteinKernel, TaskCovariance};
use crate::types::Dataset;

const REL_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 500;

/// Progress on one value of `δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RungRecord {
    pub delta: f64,
    /// Surrogate objective at the warm start.
    pub start_objective: f64,
    pub end_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-rung progress plus the effective coefficients `Φ = ΘB` at the end,
/// stored point-major (`Φ[a·T + t]`).
#[derive(Clone, Debug)]
pub struct ConvexReport {
    pub rungs: Vec<RungRecord>,
    pub effective_theta: Vec<f64>,
}

struct State {
    phi: DMatrix<f64>,
    beta: Vec<f64>,
}

fn surrogate(k: &DMatrix<f64>, data: &Dataset, st: &State, b: &TaskCovariance, lambda: f64, delta: f64) -> Result<f64> {
    let t = data.n_tasks();
    let g = k * &st.phi;
    let mut fit = 0.0;
    for s in 0..t {
        let sq: Vec<f64> = data
            .task_range(s)
            .map(|a| {
                let r = data.values()[a] - st.beta[s] - g[(a, s)];
                r * r
            })
            .collect();
        fit += pairwise_sum(&sq) / sq.len() as f64;
    }
    let s_mat = gram_of(&st.phi, k, delta);
    let binv_s = SpdFactor::new(b.b())?.solve_mat(&s_mat);
    Ok(fit + lambda * binv_s.trace() + b.b().norm_squared())
}

fn gram_of(phi: &DMatrix<f64>, k: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let mut s = phi.transpose() * k * phi;
    s = (&s + s.transpose()) * 0.5;
    for i in 0..s.nrows() {
        s[(i, i)] += delta * delta;
    }
    s
}

fn solve_coefficients(k: &DMatrix<f64>, data: &Dataset, b: &TaskCovariance, lambda: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = data.len();
    let t = data.n_tasks();
    let bm = b.b();
    let gs = DMatrix::from_fn(n, n, |i, j| bm[(data.task_of(i), data.task_of(j))] * k[(i, j)]);
    let (alpha, beta) = joint_solve(&regularised(&gs, data, lambda), data)?;
    let mut theta = DMatrix::zeros(n, t);
    for a in 0..n {
        theta[(a, data.task_of(a))] = alpha[a];
    }
    Ok((theta * bm, beta))
}

fn update_cov(phi: &DMatrix<f64>, k: &DMatrix<f64>, lambda: f64, delta: f64) -> Result<TaskCovariance> {
    let s = gram_of(phi, k, delta) * (lambda / 2.0);
    let b = sym_apply(&s, |v| v.max(0.0).cbrt());
    TaskCovariance::new((&b + b.transpose()) * 0.5)
}

/// Runs the alternating scheme down a strictly decreasing ladder of `δ`
/// values, starting from `B = I`.
///
/// Returns the fitted model under the learned kernel `B* k₀` with
/// coefficients `Φ B*⁻¹`, the covariance `B*`, and the per-rung record.
pub fn fit_convex_b_ladder(
    kernel: &SteinKernel,
    data: &Dataset,
    ladder: &[f64],
    lambda: f64,
) -> Result<(VvcvModel, TaskCovariance, ConvexReport)> {
    if !matches!(kernel.form(), SteinForm::SharedTarget { .. }) {
        return Err(Error::Unsupported(
            "the convex covariance path needs a kernel whose tasks share one target density".into(),
        ));
    }
    if ladder.is_empty() {
        return Err(Error::InvalidArgument("the δ ladder is empty".into()));
    }
    if ladder.iter().any(|d| !(*d > 0.0 && d.is_finite())) || ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "the δ ladder must be positive and strictly decreasing, got {ladder:?}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if data.n_tasks() != kernel.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: kernel.n_tasks(),
            got: data.n_tasks(),
        });
    }
    let t = kernel.n_tasks();
    let unit = kernel
        .with_cov(TaskCovariance::identity(t))?
        .unit_gram_dataset(data)?;
    let n = data.len();
    let k = DMatrix::from_fn(n, n, |i, j| unit.entry(i, j, 0, 0));

    let mut cov = TaskCovariance::identity(t);
    let (phi, beta) = solve_coefficients(&k, data, &cov, lambda)?;
    let mut st = State { phi, beta };
    let mut rungs = Vec::with_capacity(ladder.len());
    for &delta in ladder {
        let start = surrogate(&k, data, &st, &cov, lambda, delta)?;
        let mut prev = start;
        let mut rec = RungRecord {
            delta,
            start_objective: start,
            end_objective: start,
            iterations: 0,
            converged: false,
        };
        for it in 1..=MAX_ITERS {
            let (phi, beta) = solve_coefficients(&k, data, &cov, lambda)?;
            st = State { phi, beta };
            cov = update_cov(&st.phi, &k, lambda, delta)?;
            let obj = surrogate(&k, data, &st, &cov, lambda, delta)?;
            rec.iterations = it;
            rec.end_objective = obj;
            if (prev - obj).abs() <= REL_TOL * prev.abs().max(f64::MIN_POSITIVE) {
                rec.converged = true;
                break;
            }
            prev = obj;
        }
        rungs.push(rec);
    }

    let theta_mat = SpdFactor::new(cov.b())?.solve_mat(&st.phi.transpose()).transpose();
    let theta: Vec<f64> = (0..n).flat_map(|a| (0..t).map(move |s| (a, s))).map(|(a, s)| theta_mat[(a, s)]).collect();
    let effective: Vec<f64> = (0..n).flat_map(|a| (0..t).map(move |s| (a, s))).map(|(a, s)| st.phi[(a, s)]).collect();
    let model = VvcvModel::new(kernel.with_cov(cov.clone())?, data, theta, st.beta, lambda)?;
    Ok((
        model,
        cov,
        ConvexReport {
            rungs,
            effective_theta: effective,
        },
    ))
}
