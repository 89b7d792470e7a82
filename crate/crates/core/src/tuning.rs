//! Base-kernel hyperparameter selection by the identity-covariance marginal
//! likelihood.
//!
//! Each task contributes `fᵀ(K + λI)⁻¹f + log det(K + λI)` where `K` is the
//! scalar Stein Gram matrix of that task's points under its own score. The
//! sum over tasks is minimised over the base kernel's log-parameters.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::BaseKernel;
use crate::linalg::SpdFactor;
use crate::solvers::{Adam, AdamConfig};
use crate::stein::SteinKernel;
use crate::types::{Dataset, Point, ScoreFn, TaskScores};

const FD_STEP: f64 = 1e-5;

/// How the search proceeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TuneMethod {
    /// Adam on the log-parameters with central finite-difference gradients.
    /// With `batch` set, each step sees a fresh random subset of that many
    /// points per task; otherwise every step uses all points.
    Adam {
        epochs: usize,
        learning_rate: f64,
        batch: Option<usize>,
        seed: u64,
    },
    /// Exhaustive search over candidate log-parameter vectors.
    Grid { candidates: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    /// Diagonal regulariser `λ` added to each Gram matrix.
    pub lambda: f64,
    pub method: TuneMethod,
    pub adam: AdamConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-5,
            method: TuneMethod::Adam {
                epochs: 20,
                learning_rate: 0.05,
                batch: None,
                seed: 0,
            },
            adam: AdamConfig::default(),
        }
    }
}

/// What the search visited.
#[derive(Clone, Debug)]
pub struct TuneReport {
    pub method: TuneMethod,
    pub initial_log_params: Vec<f64>,
    pub initial_objective: f64,
    pub best_log_params: Vec<f64>,
    pub best_objective: f64,
    /// Full-data objective after each epoch, or at each grid candidate.
    pub trace: Vec<f64>,
}

/// Negative log marginal likelihood of one task, up to constants.
pub fn neg_log_marginal(base: &BaseKernel, score: &ScoreFn, points: &[Point], values: &[f64], lambda: f64) -> Result<f64> {
    let scores: Result<Vec<TaskScores>> = points.par_iter().map(|x| Ok(vec![score.eval(x)?])).collect();
    task_term(base, score, points, &scores?, values, lambda)
}

fn task_term(
    base: &BaseKernel,
    score: &ScoreFn,
    points: &[Point],
    scores: &[TaskScores],
    values: &[f64],
    lambda: f64,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyTask(0));
    }
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: values.len(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let k = SteinKernel::scalar(base.clone(), score.clone())?;
    let unit = k.unit_gram_scored(points, scores, points, scores, true)?;
    let n = points.len();
    let mut g = DMatrix::from_fn(n, n, |i, j| unit.entry(i, j, 0, 0));
    for i in 0..n {
        g[(i, i)] += lambda;
    }
    let f = SpdFactor::cholesky_only(&g)?;
    let y = DVector::from_column_slice(values);
    Ok(y.dot(&f.solve(&y)) + f.log_det()?)
}

/// Per-task points, cached scores and values, possibly subsampled.
struct TaskData {
    score: ScoreFn,
    points: Vec<Point>,
    scores: Vec<TaskScores>,
    values: Vec<f64>,
}

impl TaskData {
    fn subset(&self, idx: &[usize]) -> TaskData {
        TaskData {
            score: self.score.clone(),
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            scores: idx.iter().map(|&i| self.scores[i].clone()).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

fn task_data(data: &Dataset) -> Result<Vec<TaskData>> {
    let all = data.scores()?;
    Ok((0..data.n_tasks())
        .map(|t| {
            let r = data.task_range(t);
            TaskData {
                score: data.score_fns()[t].clone(),
                points: data.points()[r.clone()].to_vec(),
                scores: all[r.clone()].iter().map(|s| vec![s[t].clone()]).collect(),
                values: data.values()[r].to_vec(),
            }
        })
        .collect())
}

fn total(base: &BaseKernel, tasks: &[TaskData], lambda: f64) -> Result<f64> {
    let terms: Result<Vec<f64>> = tasks
        .par_iter()
        .map(|d| task_term(base, &d.score, &d.points, &d.scores, &d.values, lambda))
        .collect();
    Ok(terms?.iter().sum())
}

/// Summed per-task negative log marginal for the whole dataset.
pub fn total_neg_log_marginal(base: &BaseKernel, data: &Dataset, lambda: f64) -> Result<f64> {
    total(base, &task_data(data)?, lambda)
}

fn fd_gradient(base: &BaseKernel, p: &[f64], tasks: &[TaskData], lambda: f64) -> Result<Vec<f64>> {
    (0..p.len())
        .map(|i| {
            let mut hi = p.to_vec();
            let mut lo = p.to_vec();
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            let fh = total(&base.with_log_params(&hi)?, tasks, lambda)?;
            let fl = total(&base.with_log_params(&lo)?, tasks, lambda)?;
            Ok((fh - fl) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Tunes the log-parameters of `base` (see [`BaseKernel::log_params`]).
///
/// The Adam path keeps the best full-data iterate seen, so the result is
/// never worse than the starting point. Candidates or iterates whose Gram
/// matrices cannot be factorised are skipped.
pub fn tune(base: &BaseKernel, data: &Dataset, cfg: &TuneConfig) -> Result<(BaseKernel, TuneReport)> {
    let tasks = task_data(data)?;
    let p0 = base.log_params();
    let f0 = total(base, &tasks, cfg.lambda);
    let mut best: Option<(Vec<f64>, f64)> = f0.as_ref().ok().map(|f| (p0.clone(), *f));
    let mut trace = Vec::new();
    let consider = |p: &[f64], f: f64, best: &mut Option<(Vec<f64>, f64)>| {
        if f.is_finite() && best.as_ref().is_none_or(|(_, b)| f < *b) {
            *best = Some((p.to_vec(), f));
        }
    };
    match &cfg.method {
        TuneMethod::Grid { candidates } => {
            if candidates.is_empty() {
                return Err(Error::InvalidArgument("the tuning grid is empty".into()));
            }
            best = None;
            for c in candidates {
                let f = base
                    .with_log_params(c)
                    .and_then(|k| total(&k, &tasks, cfg.lambda))
                    .unwrap_or(f64::NAN);
                trace.push(f);
                consider(c, f, &mut best);
            }
        }
        TuneMethod::Adam {
            epochs,
            learning_rate,
            batch,
            seed,
        } => {
            if !(*learning_rate > 0.0 && learning_rate.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "tuning learning rate must be positive, got {learning_rate}"
                )));
            }
            if p0.is_empty() {
                trace.resize(*epochs, f0.clone().unwrap_or(f64::NAN));
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut adam = Adam::new(p0.len(), *learning_rate, cfg.adam);
                let mut p = p0.clone();
                for _ in 0..*epochs {
                    let chunks: Vec<Vec<TaskData>> = match batch {
                        Some(b) if *b > 0 => {
                            let perms: Vec<Vec<usize>> = tasks
                                .iter()
                                .map(|d| {
                                    let mut v: Vec<usize> = (0..d.points.len()).collect();
                                    v.shuffle(&mut rng);
                                    v
                                })
                                .collect();
                            let steps = tasks.iter().map(|d| d.points.len().div_ceil(*b)).max().unwrap_or(0);
                            (0..steps)
                                .map(|s| {
                                    tasks
                                        .iter()
                                        .zip(&perms)
                                        .map(|(d, perm)| {
                                            let lo = (s * b).min(perm.len());
                                            let hi = ((s + 1) * b).min(perm.len());
                                            d.subset(&perm[lo..hi])
                                        })
                                        .filter(|d| !d.points.is_empty())
                                        .collect()
                                })
                                .collect()
                        }
                        Some(_) => return Err(Error::InvalidArgument("tuning batch must be positive".into())),
                        None => vec![Vec::new()],
                    };
                    for chunk in &chunks {
                        let view = if chunk.is_empty() { &tasks } else { chunk };
                        let k = base.with_log_params(&p)?;
                        match fd_gradient(&k, &p, view, cfg.lambda) {
                            Ok(g) if g.iter().all(|v| v.is_finite()) => adam.step(&mut p, &g),
                            _ => continue,
                        }
                    }
                    let f = base
                        .with_log_params(&p)
                        .and_then(|k| total(&k, &tasks, cfg.lambda))
                        .unwrap_or(f64::NAN);
                    trace.push(f);
                    consider(&p, f, &mut best);
                }
            }
        }
    }
    let (bp, bf) = best.ok_or(Error::Numerical {
        condition: f64::INFINITY,
    })?;
    let tuned = base.with_log_params(&bp)?;
    let report = TuneReport {
        method: cfg.method.clone(),
        initial_log_params: p0,
        initial_objective: f0.unwrap_or(f64::NAN),
        best_log_params: bp,
        best_objective: bf,
        trace,
    };
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stein::k0_scalar;
    use crate::types::gaussian_score;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_data(m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point> = (0..m).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
        let vals = pts.iter().map(|x| x[0].sin() + x[0] * x[0]).collect();
        Dataset::from_parts(vec![pts], vec![vals], vec![gaussian_score(&[0.0], &[1.0]).unwrap()]).unwrap()
    }

    #[test]
    fn single_point_by_hand() {
        let base = BaseKernel::squared_exponential(0.7).unwrap();
        let score = gaussian_score(&[0.5], &[2.0]).unwrap();
        let x = vec![vec![0.3]];
        let k00 = k0_scalar(&base, &score, &x[0], &x[0]).unwrap();
        let lam = 1e-3;
        let got = neg_log_marginal(&base, &score, &x, &[1.7], lam).unwrap();
        let want = 1.7f64.powi(2) / (k00 + lam) + (k00 + lam).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn scaling_and_zero_values() {
        let d = normal_data(10, 1);
        let base = BaseKernel::squared_exponential(1.0).unwrap();
        let s = &d.score_fns()[0];
        let pts = d.task_points(0);
        let zero = neg_log_marginal(&base, s, pts, &[0.0; 10], 1e-4).unwrap();
        let one = neg_log_marginal(&base, s, pts, d.task_values(0), 1e-4).unwrap();
        let scaled: Vec<f64> = d.task_values(0).iter().map(|v| 3.0 * v).collect();
        let three = neg_log_marginal(&base, s, pts, &scaled, 1e-4).unwrap();
        assert!(((three - zero) - 9.0 * (one - zero)).abs() < 1e-6 * (one - zero).abs());
        let bigger = neg_log_marginal(&base, s, pts, &[0.0; 10], 1e-2).unwrap();
        assert!(bigger > zero);
    }

    #[test]
    fn grid_of_one_returns_it() {
        let d = normal_data(8, 2);
        let base = BaseKernel::squared_exponential(1.0).unwrap();
        let cfg = TuneConfig {
            method: TuneMethod::Grid {
                candidates: vec![vec![0.3]],
            },
            ..TuneConfig::default()
        };
        let (k, rep) = tune(&base, &d, &cfg).unwrap();
        assert_eq!(rep.best_log_params, vec![0.3]);
        assert_eq!(k, base.with_log_params(&[0.3]).unwrap());
    }

    #[test]
    fn grid_minimum_is_local() {
        let d = normal_data(20, 3);
        let base = BaseKernel::squared_exponential(1.0).unwrap();
        let grid: Vec<Vec<f64>> = (0..25).map(|i| vec![-2.0 + 0.15 * i as f64]).collect();
        let cfg = TuneConfig {
            lambda: 1e-4,
            method: TuneMethod::Grid { candidates: grid.clone() },
            ..TuneConfig::default()
        };
        let (_, rep) = tune(&base, &d, &cfg).unwrap();
        let i = grid.iter().position(|g| g == &rep.best_log_params).unwrap();
        for j in [i.saturating_sub(1), (i + 1).min(grid.len() - 1)] {
            assert!(rep.trace[j] >= rep.best_objective);
        }
    }

    #[test]
    fn adam_path_never_worsens() {
        let d = normal_data(15, 4);
        for batch in [None, Some(5)] {
            let base = BaseKernel::squared_exponential(3.0).unwrap();
            let cfg = TuneConfig {
                lambda: 1e-4,
                method: TuneMethod::Adam {
                    epochs: 20,
                    learning_rate: 0.05,
                    batch,
                    seed: 7,
                },
                ..TuneConfig::default()
            };
            let (_, rep) = tune(&base, &d, &cfg).unwrap();
            assert!(rep.best_objective <= rep.initial_objective + 1e-9);
            assert_eq!(rep.trace.len(), 20);
            let (_, again) = tune(&base, &d, &cfg).unwrap();
            assert_eq!(rep.best_log_params, again.best_log_params);
        }
    }

    #[test]
    fn protocol_fields_parse_and_echo() {
        let cfg: TuneConfig =
            toml::from_str("lambda = 1e-5\n[method.adam]\nepochs = 20\nlearning_rate = 0.05\nbatch = 5\nseed = 1\n")
                .unwrap();
        let d = normal_data(10, 5);
        let (_, rep) = tune(&BaseKernel::squared_exponential(1.0).unwrap(), &d, &cfg).unwrap();
        assert_eq!(
            rep.method,
            TuneMethod::Adam {
                epochs: 20,
                learning_rate: 0.05,
                batch: Some(5),
                seed: 1
            }
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reordering_does_not_change_value(seed in 0u64..1000) {
            let d = normal_data(9, seed);
            let base = BaseKernel::squared_exponential(0.8).unwrap();
            let s = &d.score_fns()[0];
            let a = neg_log_marginal(&base, s, d.task_points(0), d.task_values(0), 1e-4).unwrap();
            let mut idx: Vec<usize> = (0..9).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
            let pts: Vec<Point> = idx.iter().map(|&i| d.task_points(0)[i].clone()).collect();
            let vals: Vec<f64> = idx.iter().map(|&i| d.task_values(0)[i]).collect();
            let b = neg_log_marginal(&base, s, &pts, &vals, 1e-4).unwrap();
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }
}
