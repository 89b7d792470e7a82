//! Integration tasks, score functions and sampled datasets.
//!
//! A [`TaskSet`] bundles `T` integration problems `Π_t[f_t]`. Each task knows
//! how to draw from its target, the score `∇ log π_t` and how many samples it
//! wants. [`build_dataset`] turns a task set into a [`Dataset`], the flat,
//! task-major collection of points and integrand values that every fitting
//! routine consumes.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A point in `ℝ^d`.
pub type Point = Vec<f64>;

/// Scores of every task evaluated at one point: `scores[t][r] = ∂_r log π_t(x)`.
pub type TaskScores = Vec<Vec<f64>>;

type ScoreClosure = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync;

/// Gradient of a log-density, `x ↦ ∇_x log π(x)`.
///
/// Only the score is ever needed, so unnormalised densities are fine.
#[derive(Clone)]
pub struct ScoreFn {
    dim: usize,
    label: String,
    f: Arc<ScoreClosure>,
}

impl fmt::Debug for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoreFn")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .finish()
    }
}

impl ScoreFn {
    pub fn new<F>(dim: usize, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        Self {
            dim,
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Evaluates the score, rejecting wrong dimensions and non-finite output.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let s = (self.f)(x)?;
        if s.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore(x.to_vec()));
        }
        Ok(s)
    }
}

/// Score of `N(mean, diag(variances))`: `x ↦ −(x − mean) ⊘ variances`.
pub fn gaussian_score(mean: &[f64], variances: &[f64]) -> Result<ScoreFn> {
    if mean.len() != variances.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: variances.len(),
        });
    }
    if mean.is_empty() {
        return Err(Error::InvalidArgument("gaussian score needs d >= 1".into()));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian variance must be positive, got {v}"
        )));
    }
    let mean = mean.to_vec();
    let var = variances.to_vec();
    let label = format!("gaussian(d={})", mean.len());
    Ok(ScoreFn::new(mean.len(), label, move |x| {
        Ok(x.iter()
            .zip(&mean)
            .zip(&var)
            .map(|((xi, mi), vi)| -(xi - mi) / vi)
            .collect())
    }))
}

/// Score of a log-normal prior on a positive scalar:
/// `θ ↦ −1/θ − (log θ − μ)/(θ σ²)`.
pub fn lognormal_prior_score(mu: f64, sigma: f64) -> Result<ScoreFn> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "log-normal needs finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
        )));
    }
    let s2 = sigma * sigma;
    Ok(ScoreFn::new(1, "lognormal", move |x| {
        let th = x[0];
        if !(th > 0.0) {
            return Err(Error::Domain(format!("log-normal score at theta={th}")));
        }
        Ok(vec![-1.0 / th - (th.ln() - mu) / (th * s2)])
    }))
}

/// Score of the power posterior `p(x | y, t) ∝ p(y | x)^t p(x)`:
/// `t ∇ log p(y|x) + ∇ log p(x)`.
pub fn power_posterior_score(
    loglik_grad: &ScoreFn,
    prior_score: &ScoreFn,
    t: f64,
) -> Result<ScoreFn> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "inverse temperature must lie in [0, 1], got {t}"
        )));
    }
    if loglik_grad.dim() != prior_score.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior_score.dim(),
            got: loglik_grad.dim(),
        });
    }
    if t == 0.0 {
        return Ok(prior_score.clone());
    }
    let lik = loglik_grad.clone();
    let prior = prior_score.clone();
    let label = format!("power_posterior(t={t})");
    Ok(ScoreFn::new(prior_score.dim(), label, move |x| {
        let a = lik.eval(x)?;
        let b = prior.eval(x)?;
        Ok(a.iter().zip(&b).map(|(ai, bi)| t * ai + bi).collect())
    }))
}

type DrawClosure = dyn Fn(&mut ChaCha8Rng) -> Point + Send + Sync;

/// Where a task's sample points come from.
#[derive(Clone)]
pub enum Sampler {
    /// Independent draws from a seeded per-task stream.
    Random { dim: usize, draw: Arc<DrawClosure> },
    /// An externally supplied sample (e.g. an MCMC chain). The first `m_t`
    /// points are used, in order.
    Fixed(Arc<Vec<Point>>),
}

impl fmt::Debug for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Random { dim, .. } => write!(f, "Sampler::Random(d={dim})"),
            Sampler::Fixed(p) => write!(f, "Sampler::Fixed(n={})", p.len()),
        }
    }
}

impl Sampler {
    pub fn random<F>(dim: usize, draw: F) -> Self
    where
        F: Fn(&mut ChaCha8Rng) -> Point + Send + Sync + 'static,
    {
        Sampler::Random {
            dim,
            draw: Arc::new(draw),
        }
    }

    /// Independent Gaussian coordinates with the given means and variances.
    pub fn gaussian(mean: &[f64], variances: &[f64]) -> Result<Self> {
        // reuse the argument checks
        gaussian_score(mean, variances)?;
        let mean = mean.to_vec();
        let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
        Ok(Self::random(mean.len(), move |rng| {
            mean.iter()
                .zip(&sd)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect()
        }))
    }

    pub fn fixed(points: Vec<Point>) -> Self {
        Sampler::Fixed(Arc::new(points))
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Sampler::Random { dim, .. } => Some(*dim),
            Sampler::Fixed(p) => p.first().map(Vec::len),
        }
    }
}

type IntegrandClosure = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// One integration problem `Π_t[f_t]`.
#[derive(Clone)]
pub struct IntegrationTask {
    pub integrand: Arc<IntegrandClosure>,
    pub score: ScoreFn,
    pub sampler: Sampler,
    pub samples: usize,
}

impl fmt::Debug for IntegrationTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrationTask")
            .field("score", &self.score)
            .field("sampler", &self.sampler)
            .field("samples", &self.samples)
            .finish()
    }
}

impl IntegrationTask {
    pub fn new<F>(integrand: F, score: ScoreFn, sampler: Sampler, samples: usize) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            integrand: Arc::new(integrand),
            score,
            sampler,
            samples,
        }
    }
}

/// An ordered collection of tasks sharing one input dimension.
#[derive(Clone, Debug)]
pub struct TaskSet {
    tasks: Vec<IntegrationTask>,
    dim: usize,
}

impl TaskSet {
    pub fn new(tasks: Vec<IntegrationTask>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::InvalidArgument("a task set needs at least one task".into()))?;
        let dim = first.score.dim();
        for (t, task) in tasks.iter().enumerate() {
            if task.score.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: task.score.dim(),
                });
            }
            if let Some(sd) = task.sampler.dim() {
                if sd != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: sd });
                }
            }
            if task.samples == 0 {
                return Err(Error::EmptyTask(t));
            }
        }
        Ok(Self { tasks, dim })
    }

    pub fn tasks(&self) -> &[IntegrationTask] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scores(&self) -> Vec<ScoreFn> {
        self.tasks.iter().map(|t| t.score.clone()).collect()
    }

    /// Same tasks with new per-task sample counts.
    pub fn with_sample_sizes(&self, m: &[usize]) -> Result<Self> {
        if m.len() != self.tasks.len() {
            return Err(Error::DimensionMismatch {
                expected: self.tasks.len(),
                got: m.len(),
            });
        }
        let tasks = self
            .tasks
            .iter()
            .zip(m)
            .map(|(t, &mt)| IntegrationTask {
                samples: mt,
                ..t.clone()
            })
            .collect();
        Self::new(tasks)
    }
}

/// Points and integrand values for all tasks, stored task-major: all of
/// task 0, then task 1, and so on.
#[derive(Debug)]
pub struct Dataset {
    dim: usize,
    offsets: Vec<usize>,
    points: Vec<Point>,
    values: Vec<f64>,
    scores: Vec<ScoreFn>,
    cache: OnceLock<Vec<TaskScores>>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        let cache = OnceLock::new();
        if let Some(c) = self.cache.get() {
            let _ = cache.set(c.clone());
        }
        Self {
            dim: self.dim,
            offsets: self.offsets.clone(),
            points: self.points.clone(),
            values: self.values.clone(),
            scores: self.scores.clone(),
            cache,
        }
    }
}

impl Dataset {
    /// Assembles a dataset from per-task points and integrand values.
    pub fn from_parts(
        points: Vec<Vec<Point>>,
        values: Vec<Vec<f64>>,
        scores: Vec<ScoreFn>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one task".into()));
        }
        if points.len() != values.len() || points.len() != scores.len() {
            return Err(Error::InvalidArgument(format!(
                "{} point sets, {} value sets and {} scores",
                points.len(),
                values.len(),
                scores.len()
            )));
        }
        let dim = scores[0].dim();
        let mut offsets = vec![0];
        let mut flat_pts = Vec::new();
        let mut flat_vals = Vec::new();
        for (t, (pts, vals)) in points.into_iter().zip(values).enumerate() {
            if pts.is_empty() {
                return Err(Error::EmptyTask(t));
            }
            if pts.len() != vals.len() {
                return Err(Error::DimensionMismatch {
                    expected: pts.len(),
                    got: vals.len(),
                });
            }
            if scores[t].dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: scores[t].dim(),
                });
            }
            for (j, (p, v)) in pts.into_iter().zip(vals).enumerate() {
                if p.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: p.len(),
                    });
                }
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "coordinate",
                        task: t,
                        sample: j,
                    });
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "integrand",
                        task: t,
                        sample: j,
                    });
                }
                flat_pts.push(p);
                flat_vals.push(v);
            }
            offsets.push(flat_pts.len());
        }
        Ok(Self {
            dim,
            offsets,
            points: flat_pts,
            values: flat_vals,
            scores,
            cache: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tasks(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of samples `N = Σ m_t`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn task_len(&self, t: usize) -> usize {
        self.offsets[t + 1] - self.offsets[t]
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        (0..self.n_tasks()).map(|t| self.task_len(t)).collect()
    }

    pub fn task_range(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn flatten(&self, t: usize, j: usize) -> usize {
        debug_assert!(j < self.task_len(t));
        self.offsets[t] + j
    }

    pub fn unflatten(&self, i: usize) -> (usize, usize) {
        let t = self.task_of(i);
        (t, i - self.offsets[t])
    }

    pub fn task_of(&self, i: usize) -> usize {
        // offsets is sorted; find the last offset <= i
        self.offsets.partition_point(|&o| o <= i) - 1
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn task_points(&self, t: usize) -> &[Point] {
        &self.points[self.task_range(t)]
    }

    pub fn task_values(&self, t: usize) -> &[f64] {
        &self.values[self.task_range(t)]
    }

    pub fn score_fns(&self) -> &[ScoreFn] {
        &self.scores
    }

    /// Per-task sample means, the plain Monte Carlo estimates.
    pub fn mc_means(&self) -> Vec<f64> {
        (0..self.n_tasks())
            .map(|t| {
                let v = self.task_values(t);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    /// Scores of every task at every point, filled on first use.
    pub fn scores(&self) -> Result<&[TaskScores]> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let filled: Result<Vec<TaskScores>> = self
            .points
            .par_iter()
            .map(|p| self.scores.iter().map(|s| s.eval(p)).collect())
            .collect();
        let _ = self.cache.set(filled?);
        Ok(self.cache.get().expect("score cache was just filled"))
    }

    /// A dataset restricted to one task, keeping that task's score.
    pub fn single_task(&self, t: usize) -> Dataset {
        let cache = OnceLock::new();
        if let Some(c) = self.cache.get() {
            let sub: Vec<TaskScores> = c[self.task_range(t)]
                .iter()
                .map(|s| vec![s[t].clone()])
                .collect();
            let _ = cache.set(sub);
        }
        Dataset {
            dim: self.dim,
            offsets: vec![0, self.task_len(t)],
            points: self.task_points(t).to_vec(),
            values: self.task_values(t).to_vec(),
            scores: vec![self.scores[t].clone()],
            cache,
        }
    }
}

/// Draws `m_t` points for every task and evaluates the integrands.
///
/// Task `t` draws from ChaCha8 stream `t` of `seed`, so the draws of one task
/// do not depend on how many other tasks exist.
pub fn build_dataset(taskset: &TaskSet, seed: u64) -> Result<Dataset> {
    let mut points = Vec::with_capacity(taskset.n_tasks());
    let mut values = Vec::with_capacity(taskset.n_tasks());
    for (t, task) in taskset.tasks().iter().enumerate() {
        let pts: Vec<Point> = match &task.sampler {
            Sampler::Random { draw, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                (0..task.samples).map(|_| draw(&mut rng)).collect()
            }
            Sampler::Fixed(all) => {
                if all.len() < task.samples {
                    return Err(Error::InvalidArgument(format!(
                        "task {t} asks for {} samples but only {} were supplied",
                        task.samples,
                        all.len()
                    )));
                }
                all[..task.samples].to_vec()
            }
        };
        let mut vals = Vec::with_capacity(pts.len());
        for (j, p) in pts.iter().enumerate() {
            let v = (task.integrand)(p);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "integrand",
                    task: t,
                    sample: j,
                });
            }
            vals.push(v);
        }
        points.push(pts);
        values.push(vals);
    }
    Dataset::from_parts(points, values, taskset.scores())
}
