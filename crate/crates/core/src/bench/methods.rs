//! Method runners: one repetition draws a dataset, optionally tunes the
//! kernel, fits, and records the `β` estimates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::problems::BenchProblem;
use super::settings::MethodSettings;
use crate::error::{Error, Result};
use crate::kernels::BaseKernel;
use crate::model::estimate_beta;
use crate::solvers::{fit_convex_b_ladder, fit_exact_joint, fit_sgd_fixed_b, fit_sgd_learn_b, FitReport, OptimConfig};
use crate::stein::{SteinKernel, TaskCovariance};
use crate::tuning::{tune, TuneConfig, TuneMethod};
use crate::types::{build_dataset, Dataset};

/// Share of failed repetitions above which a run is an error.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Plain sample means.
    #[serde(rename = "MC")]
    Mc,
    /// Single-task control variates fitted by minibatch Adam.
    #[serde(rename = "CV-sgd")]
    CvSgd,
    /// Single-task control functionals solved in closed form.
    #[serde(rename = "CF-exact")]
    CfExact,
    /// Vector-valued control variates with a fixed task covariance.
    #[serde(rename = "vvCV-fixedB")]
    VvFixedB,
    /// Vector-valued control variates with a learned task covariance.
    #[serde(rename = "vvCV-estB")]
    VvEstB,
    /// Shared-target vector-valued control variates with the covariance from
    /// the convex surrogate.
    #[serde(rename = "vvCV-convexB")]
    VvConvexB,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mc,
        Method::CvSgd,
        Method::CfExact,
        Method::VvFixedB,
        Method::VvEstB,
        Method::VvConvexB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mc => "MC",
            Method::CvSgd => "CV-sgd",
            Method::CfExact => "CF-exact",
            Method::VvFixedB => "vvCV-fixedB",
            Method::VvEstB => "vvCV-estB",
            Method::VvConvexB => "vvCV-convexB",
        }
    }

    /// Whether the method produces a per-epoch trace.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::CvSgd | Method::VvFixedB | Method::VvEstB)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts the display names and short aliases, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase();
        Ok(match k.as_str() {
            "mc" => Method::Mc,
            "cv" | "cv-sgd" => Method::CvSgd,
            "cf" | "cf-exact" => Method::CfExact,
            "vvcv-fixedb" | "fixedb" => Method::VvFixedB,
            "vvcv-estb" | "estb" => Method::VvEstB,
            "vvcv-convexb" | "convexb" => Method::VvConvexB,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown method '{s}', expected one of mc, cv, cf, vvcv-fixedb, vvcv-estb, vvcv-convexb"
                )))
            }
        })
    }
}

/// One repetition of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub problem: String,
    pub method: Method,
    pub m: Vec<usize>,
    pub rep: usize,
    pub seed: u64,
    /// `None` when the repetition failed.
    pub estimates: Option<Vec<f64>>,
    pub truths: Vec<f64>,
    pub seconds: f64,
    pub config_digest: String,
    pub error: Option<String>,
}

impl BenchRecord {
    /// `|estimate − truth|` per task, recomputed on every call.
    pub fn abs_errors(&self) -> Option<Vec<f64>> {
        self.estimates
            .as_ref()
            .map(|e| e.iter().zip(&self.truths).map(|(a, b)| (a - b).abs()).collect())
    }
}

/// Estimate of one task after one epoch of a stochastic fit.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub problem: String,
    pub method: Method,
    pub m: Vec<usize>,
    pub rep: usize,
    pub seed: u64,
    pub epoch: usize,
    pub task: usize,
    pub estimate: f64,
    pub abs_err: f64,
}

/// Records of a whole run of one method.
#[derive(Clone, Debug, Default)]
pub struct MethodRun {
    pub records: Vec<BenchRecord>,
    pub traces: Vec<TraceRecord>,
}

impl MethodRun {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.estimates.is_none()).count()
    }
}

/// Seed of repetition `rep`, derived from the run seed with a SplitMix64 step.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed ^ (rep as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn reseed_tune(cfg: &TuneConfig, seed: u64) -> TuneConfig {
    let mut c = cfg.clone();
    if let TuneMethod::Adam { seed: s, .. } = &mut c.method {
        *s ^= seed;
    }
    c
}

fn reseed(cfg: &OptimConfig, seed: u64) -> OptimConfig {
    OptimConfig {
        seed: cfg.seed ^ seed,
        ..cfg.clone()
    }
}

fn tuned(kernel: &BaseKernel, data: &Dataset, cfg: Option<&TuneConfig>, seed: u64) -> Result<BaseKernel> {
    match cfg {
        Some(c) => Ok(tune(kernel, data, &reseed_tune(c, seed))?.0),
        None => Ok(kernel.clone()),
    }
}

/// Checks that `method` can run on `problem` with `settings` at all.
pub fn check_method(problem: &BenchProblem, method: Method, settings: &MethodSettings) -> Result<()> {
    settings.validate(problem.n_tasks())?;
    if method == Method::VvConvexB && !problem.shared_target() {
        return Err(Error::Unsupported(format!(
            "{method} needs every task to share one target density, which '{}' does not",
            problem.name
        )));
    }
    Ok(())
}

/// Result of fitting one method to one dataset.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Per-task estimates of the integrals.
    pub estimates: Vec<f64>,
    /// Per-epoch estimates of every task, for the stochastic methods.
    pub trace: Vec<Vec<f64>>,
    /// Fitted coefficients, concatenated over tasks for the single-task methods.
    pub theta: Vec<f64>,
    /// The task covariance, when the method learns one.
    pub cov: Option<TaskCovariance>,
}

fn epoch_betas(rep: &FitReport) -> Vec<Vec<f64>> {
    rep.trace.iter().map(|r| r.beta.clone()).collect()
}

/// Fits `method` to `data` with the given settings. `seed` is mixed into the
/// seeds of the tuning and minibatch configs.
///
/// The convex-covariance method uses the first task's score for every task,
/// so callers must make sure all tasks share one target.
pub fn fit_method(method: Method, data: &Dataset, s: &MethodSettings, seed: u64) -> Result<FitOutcome> {
    let t = data.n_tasks();
    s.validate(t)?;
    let outcome = |estimates, trace, theta, cov| FitOutcome {
        estimates,
        trace,
        theta,
        cov,
    };
    match method {
        Method::Mc => Ok(outcome(data.mc_means(), Vec::new(), Vec::new(), None)),
        Method::CvSgd | Method::CfExact => {
            let mut est = Vec::with_capacity(t);
            let mut theta = Vec::new();
            let mut per_task_traces = Vec::with_capacity(t);
            for task in 0..t {
                let single = data.single_task(task);
                let base = tuned(&s.kernel, &single, s.scalar_tuning(), seed)?;
                let kernel = SteinKernel::scalar(base, single.score_fns()[0].clone())?;
                let model = if method == Method::CfExact {
                    fit_exact_joint(&kernel, &single, s.cf_lambda)?
                } else {
                    let (model, rep) = fit_sgd_fixed_b(&kernel, &single, &reseed(&s.cv, seed ^ task as u64))?;
                    per_task_traces.push(epoch_betas(&rep));
                    model
                };
                est.push(estimate_beta(&model)[0]);
                theta.extend_from_slice(model.theta());
            }
            let epochs = per_task_traces.iter().map(Vec::len).min().unwrap_or(0);
            let trace = (0..epochs)
                .map(|e| per_task_traces.iter().map(|tr| tr[e][0]).collect())
                .collect();
            Ok(outcome(est, trace, theta, None))
        }
        Method::VvFixedB | Method::VvEstB => {
            let base = tuned(&s.kernel, data, s.vv_tuning(), seed)?;
            let cfg = reseed(&s.vv, seed);
            if method == Method::VvFixedB {
                let kernel = SteinKernel::first_order(base, data.score_fns().to_vec(), s.fixed_cov(t)?)?;
                let (model, rep) = fit_sgd_fixed_b(&kernel, data, &cfg)?;
                Ok(outcome(estimate_beta(&model), epoch_betas(&rep), model.theta().to_vec(), None))
            } else {
                let b0 = s.initial_cov(t)?;
                let kernel = SteinKernel::first_order(base, data.score_fns().to_vec(), b0.clone())?;
                let (model, cov, rep) = fit_sgd_learn_b(&kernel, data, &cfg, &b0)?;
                Ok(outcome(estimate_beta(&model), epoch_betas(&rep), model.theta().to_vec(), Some(cov)))
            }
        }
        Method::VvConvexB => {
            let base = tuned(&s.kernel, data, s.vv_tuning(), seed)?;
            let kernel = SteinKernel::shared_target(base, data.score_fns()[0].clone(), TaskCovariance::identity(t))?;
            let (model, cov, _) = fit_convex_b_ladder(&kernel, data, &s.convex_ladder, s.convex_lambda)?;
            Ok(outcome(estimate_beta(&model), Vec::new(), model.theta().to_vec(), Some(cov)))
        }
    }
}

/// What to run.
#[derive(Clone, Debug)]
pub struct RunSpec<'a> {
    pub problem: &'a BenchProblem,
    pub method: Method,
    pub m: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub settings: &'a MethodSettings,
    pub trace: bool,
    pub config_digest: String,
}

/// Runs `reps` independent repetitions in parallel.
///
/// Repetition `r` draws its data with [`rep_seed`]`(seed, r)`, so every
/// method sees the same samples in the same repetition. Failed repetitions
/// are kept as records without estimates; more than
/// [`MAX_FAILURE_RATE`] of them turns the run into an error.
pub fn run_method(spec: &RunSpec<'_>) -> Result<MethodRun> {
    let problem = spec.problem;
    check_method(problem, spec.method, spec.settings)?;
    if spec.reps == 0 {
        return Err(Error::InvalidArgument("at least one repetition is required".into()));
    }
    let taskset = problem.taskset(&spec.m)?;
    let truths = problem.truth_values();
    let outcomes: Vec<(BenchRecord, Vec<TraceRecord>)> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = rep_seed(spec.seed, rep);
            let start = Instant::now();
            let result = build_dataset(&taskset, seed)
                .and_then(|d| fit_method(spec.method, &d, spec.settings, seed))
                .map(|o| (o.estimates, o.trace));
            let seconds = if spec.settings.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let (estimates, error, trace) = match result {
                Ok((e, tr)) => (Some(e), None, tr),
                Err(e) => (None, Some(e.to_string()), Vec::new()),
            };
            let traces = if spec.trace {
                trace
                    .iter()
                    .enumerate()
                    .flat_map(|(ep, betas)| {
                        betas.iter().enumerate().map(move |(task, &b)| (ep, task, b))
                    })
                    .map(|(ep, task, b)| TraceRecord {
                        problem: problem.name.clone(),
                        method: spec.method,
                        m: spec.m.clone(),
                        rep,
                        seed,
                        epoch: ep + 1,
                        task,
                        estimate: b,
                        abs_err: (b - truths[task]).abs(),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let record = BenchRecord {
                problem: problem.name.clone(),
                method: spec.method,
                m: spec.m.clone(),
                rep,
                seed,
                estimates,
                truths: truths.clone(),
                seconds,
                config_digest: spec.config_digest.clone(),
                error,
            };
            (record, traces)
        })
        .collect();
    let mut run = MethodRun::default();
    for (r, tr) in outcomes {
        run.records.push(r);
        run.traces.extend(tr);
    }
    let failed = run.failures();
    if failed as f64 > MAX_FAILURE_RATE * spec.reps as f64 {
        let first = run
            .records
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(Error::TooManyFailures {
            failed,
            reps: spec.reps,
            detail: format!("{} (first error: {first})", spec.method),
        });
    }
    Ok(run)
}
