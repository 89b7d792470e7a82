//! Minibatch Adam fits with a fixed or a learned task covariance.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::{EpochRecord, FitReport, OptimConfig};
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::model::VvcvModel;
use crate::stein::{SteinKernel, TaskCovariance};
use crate::types::Dataset;

/// Row `a` of the unit Gram restricted to output `t_a`:
/// `psi[a][b * T + t'] = C(x_a, x_b)_{t_a t'}`. With `B` applied entrywise this
/// is the linear map from `θ` to the fitted values.
pub(crate) struct Features {
    n: usize,
    t: usize,
    tasks: Vec<usize>,
    psi: Vec<f64>,
}

impl Features {
    pub(crate) fn new(kernel: &SteinKernel, data: &Dataset) -> Result<Self> {
        let unit = kernel.unit_gram_dataset(data)?;
        let n = data.len();
        let t = kernel.n_tasks();
        let tasks: Vec<usize> = (0..n).map(|a| data.task_of(a)).collect();
        let mut psi = vec![0.0; n * n * t];
        for a in 0..n {
            let ta = tasks[a];
            for b in 0..n {
                let blk = unit.block(a, b);
                for tp in 0..t {
                    psi[a * n * t + b * t + tp] = blk[ta * t + tp];
                }
            }
        }
        Ok(Self { n, t, tasks, psi })
    }

    fn row(&self, a: usize) -> &[f64] {
        let w = self.n * self.t;
        &self.psi[a * w..(a + 1) * w]
    }

    /// `g_a = Σ_{b,t'} B_{t_a t'} ψ_a[b, t'] θ_{b t'}`.
    fn fitted(&self, a: usize, b: &DMatrix<f64>, theta: &[f64]) -> f64 {
        let ta = self.tasks[a];
        let row = self.row(a);
        let t = self.t;
        let mut s = 0.0;
        for tp in 0..t {
            let btp = b[(ta, tp)];
            let mut acc = 0.0;
            let mut i = tp;
            while i < row.len() {
                acc += row[i] * theta[i];
                i += t;
            }
            s += btp * acc;
        }
        s
    }

    /// `Σ_b ψ_a[b, t'] θ_{b t'}` for each `t'`, i.e. the fitted value split by
    /// the covariance column it multiplies.
    fn split_fitted(&self, a: usize, theta: &[f64]) -> Vec<f64> {
        let row = self.row(a);
        let t = self.t;
        let mut out = vec![0.0; t];
        for (i, (r, th)) in row.iter().zip(theta).enumerate() {
            out[i % t] += r * th;
        }
        out
    }
}

/// Full-data objective `Σ_t (1/m_t) Σ_j r² + λ‖θ‖²` (+ `‖B‖²_F` if asked).
fn full_objective(
    feats: &Features,
    data: &Dataset,
    b: &DMatrix<f64>,
    theta: &[f64],
    beta: &[f64],
    lambda: f64,
    b_penalty: bool,
) -> f64 {
    let res: Vec<f64> = (0..feats.n)
        .map(|a| data.values()[a] - beta[feats.tasks[a]] - feats.fitted(a, b, theta))
        .collect();
    let mut total = 0.0;
    for t in 0..data.n_tasks() {
        let r = &res[data.task_range(t)];
        let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
        total += pairwise_sum(&sq) / r.len() as f64;
    }
    let ridge: Vec<f64> = theta.iter().map(|v| v * v).collect();
    total += lambda * pairwise_sum(&ridge);
    if b_penalty {
        total += b.norm_squared();
    }
    total
}

/// Minibatch gradient of the objective with respect to `(θ, β)`, laid out as
/// `[θ (N·T), β (T)]`, and the residuals of the batch points.
fn theta_beta_grad(
    feats: &Features,
    data: &Dataset,
    batch: &[Vec<usize>],
    b: &DMatrix<f64>,
    params: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<(usize, f64, f64)>) {
    let nt = feats.n * feats.t;
    let t = feats.t;
    let (theta, beta) = params.split_at(nt);
    let mut grad = vec![0.0; nt + t];
    let mut resid = Vec::new();
    for (task, idx) in batch.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let w = 1.0 / idx.len() as f64;
        for &a in idx {
            let r = data.values()[a] - beta[task] - feats.fitted(a, b, theta);
            resid.push((a, r, w));
            let coef = -2.0 * w * r;
            grad[nt + task] += coef;
            let row = feats.row(a);
            for (i, g) in grad[..nt].iter_mut().enumerate() {
                *g += coef * b[(task, i % t)] * row[i];
            }
        }
    }
    for i in 0..nt {
        grad[i] += 2.0 * lambda * theta[i];
    }
    (grad, resid)
}

/// Gradient of the minibatch objective with respect to the free parameters
/// of `L` (see [`TaskCovariance::free_params`]).
fn covariance_grad(
    feats: &Features,
    data: &Dataset,
    batch: &[Vec<usize>],
    cov: &TaskCovariance,
    theta: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let t = feats.t;
    let b = cov.b();
    // ∂/∂B_{st'} treating the entries of B as independent
    let mut gb = DMatrix::<f64>::zeros(t, t);
    for (task, idx) in batch.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let w = 1.0 / idx.len() as f64;
        for &a in idx {
            let split = feats.split_fitted(a, theta);
            let g: f64 = (0..t).map(|tp| b[(task, tp)] * split[tp]).sum();
            let r = data.values()[a] - beta[task] - g;
            for tp in 0..t {
                gb[(task, tp)] += -2.0 * w * r * split[tp];
            }
        }
    }
    gb += b * 2.0;
    let l = cov.chol();
    let dl = (&gb + gb.transpose()) * l;
    let mut out = Vec::with_capacity(t * (t + 1) / 2);
    for i in 0..t {
        for j in 0..=i {
            out.push(if i == j { dl[(i, i)] * l[(i, i)] } else { dl[(i, j)] });
        }
    }
    out
}

/// Full-data gradient of [`objective_with_b`](crate::model::objective_with_b)
/// under the Euclidean ridge with respect to the free parameters of the
/// Cholesky factor of `cov`, holding the coefficients of `model` fixed.
pub fn covariance_gradient(model: &VvcvModel, data: &Dataset, cov: &TaskCovariance) -> Result<Vec<f64>> {
    if data.n_tasks() != model.n_tasks() || cov.dim() != model.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: model.n_tasks(),
            got: if cov.dim() != model.n_tasks() { cov.dim() } else { data.n_tasks() },
        });
    }
    if model.anchors() != data.points() {
        return Err(Error::InvalidArgument(
            "the model must be anchored at the dataset points".into(),
        ));
    }
    let feats = Features::new(model.kernel(), data)?;
    let all: Vec<Vec<usize>> = (0..data.n_tasks()).map(|t| data.task_range(t).collect()).collect();
    Ok(covariance_grad(&feats, data, &all, cov, model.theta(), model.beta()))
}

fn shuffled_batches(
    rng: &mut ChaCha8Rng,
    data: &Dataset,
    sizes: &[usize],
) -> Vec<Vec<Vec<usize>>> {
    let t = data.n_tasks();
    let perms: Vec<Vec<usize>> = (0..t)
        .map(|s| {
            let mut p: Vec<usize> = data.task_range(s).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let iters = (0..t)
        .map(|s| data.task_len(s).div_ceil(sizes[s]))
        .max()
        .unwrap_or(0);
    (0..iters)
        .map(|i| {
            (0..t)
                .map(|s| {
                    let lo = (i * sizes[s]).min(perms[s].len());
                    let hi = ((i + 1) * sizes[s]).min(perms[s].len());
                    perms[s][lo..hi].to_vec()
                })
                .collect()
        })
        .collect()
}

fn check_inputs(kernel: &SteinKernel, data: &Dataset, cfg: &OptimConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if data.n_tasks() != kernel.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: kernel.n_tasks(),
            got: data.n_tasks(),
        });
    }
    cfg.batch.sizes(&data.sample_sizes())
}

fn diverged(epoch: usize, obj: f64, initial: f64, factor: f64) -> Option<Error> {
    if !obj.is_finite() || obj > factor * initial.max(f64::MIN_POSITIVE) {
        Some(Error::Diverged {
            epoch,
            objective: obj,
            initial,
        })
    } else {
        None
    }
}

fn plateaued(trace: &[EpochRecord], tol: Option<f64>) -> bool {
    match (tol, trace) {
        (Some(tol), [.., prev, last]) => {
            (prev.objective - last.objective).abs() <= tol * prev.objective.abs().max(f64::MIN_POSITIVE)
        }
        _ => false,
    }
}

/// Minibatch Adam on `(θ, β)` with `B` held fixed.
///
/// Starts from `θ = 0` and the per-task sample means, reshuffles each task's
/// indices every epoch and uses the Euclidean ridge `λ‖θ‖²`.
pub fn fit_sgd_fixed_b(
    kernel: &SteinKernel,
    data: &Dataset,
    cfg: &OptimConfig,
) -> Result<(VvcvModel, FitReport)> {
    let sizes = check_inputs(kernel, data, cfg)?;
    let feats = Features::new(kernel, data)?;
    let nt = feats.n * feats.t;
    let b = kernel.cov().b().clone();
    let mut params = vec![0.0; nt];
    params.extend(data.mc_means());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam);
    let initial = full_objective(&feats, data, &b, &params[..nt], &params[nt..], cfg.lambda, false);
    let mut report = FitReport {
        initial_objective: initial,
        batch_sizes: sizes.clone(),
        trace: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        for batch in shuffled_batches(&mut rng, data, &sizes) {
            let (g, _) = theta_beta_grad(&feats, data, &batch, &b, &params, cfg.lambda);
            adam.step(&mut params, &g);
        }
        let obj = full_objective(&feats, data, &b, &params[..nt], &params[nt..], cfg.lambda, false);
        report.trace.push(EpochRecord {
            epoch: epoch + 1,
            objective: obj,
            beta: params[nt..].to_vec(),
            b: None,
        });
        if let Some(e) = diverged(epoch + 1, obj, initial, cfg.divergence_factor) {
            return Err(e);
        }
        if plateaued(&report.trace, cfg.early_stop_rel_tol) {
            break;
        }
    }
    let beta = params.split_off(nt);
    let model = VvcvModel::new(kernel.clone(), data, params, beta, cfg.lambda)?;
    Ok((model, report))
}

/// Block-coordinate minibatch Adam: one step on `(θ, β)` with `B` fixed,
/// then one step on the Cholesky factor of `B` with `(θ, β)` fixed, per
/// minibatch. The objective adds `‖B‖²_F` to the fixed-`B` objective.
pub fn fit_sgd_learn_b(
    kernel: &SteinKernel,
    data: &Dataset,
    cfg: &OptimConfig,
    b0: &TaskCovariance,
) -> Result<(VvcvModel, TaskCovariance, FitReport)> {
    let sizes = check_inputs(kernel, data, cfg)?;
    if b0.dim() != kernel.n_tasks() {
        return Err(Error::DimensionMismatch {
            expected: kernel.n_tasks(),
            got: b0.dim(),
        });
    }
    let feats = Features::new(kernel, data)?;
    let nt = feats.n * feats.t;
    let t = feats.t;
    let mut cov = b0.clone();
    let mut lparams = cov.free_params();
    let mut params = vec![0.0; nt];
    params.extend(data.mc_means());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam);
    let mut adam_b = Adam::new(lparams.len(), cfg.b_learning_rate.unwrap_or(cfg.learning_rate), cfg.adam);
    let initial = full_objective(&feats, data, cov.b(), &params[..nt], &params[nt..], cfg.lambda, true);
    let mut report = FitReport {
        initial_objective: initial,
        batch_sizes: sizes.clone(),
        trace: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        for batch in shuffled_batches(&mut rng, data, &sizes) {
            let (g, _) = theta_beta_grad(&feats, data, &batch, cov.b(), &params, cfg.lambda);
            adam.step(&mut params, &g);
            let gl = covariance_grad(&feats, data, &batch, &cov, &params[..nt], &params[nt..]);
            adam_b.step(&mut lparams, &gl);
            cov = TaskCovariance::from_free_params(t, &lparams)?;
        }
        let obj = full_objective(&feats, data, cov.b(), &params[..nt], &params[nt..], cfg.lambda, true);
        report.trace.push(EpochRecord {
            epoch: epoch + 1,
            objective: obj,
            beta: params[nt..].to_vec(),
            b: Some(cov.b().transpose().as_slice().to_vec()),
        });
        if let Some(e) = diverged(epoch + 1, obj, initial, cfg.divergence_factor) {
            return Err(e);
        }
        if plateaued(&report.trace, cfg.early_stop_rel_tol) {
            break;
        }
    }
    let beta = params.split_off(nt);
    let fitted_kernel = kernel.with_cov(cov.clone())?;
    let model = VvcvModel::new(fitted_kernel, data, params, beta, cfg.lambda)?;
    Ok((model, cov, report))
}
