//! Bundled benchmark problems.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::settings::MethodSettings;
use crate::error::{Error, Result};
use crate::kernels::BaseKernel;
use crate::solvers::{BatchSpec, OptimConfig};
use crate::tuning::{TuneConfig, TuneMethod};
use crate::types::{gaussian_score, IntegrationTask, Sampler, TaskSet};

/// Where a ground-truth value comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    /// Exact expectation.
    Analytic,
    /// A published reference value.
    Reference,
    /// A large-sample Monte Carlo mean with its seed and standard error.
    MonteCarlo { n: usize, seed: u64, std_err: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub value: f64,
    pub provenance: Provenance,
}

type Integrand = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One target density shared by the sampler and the score.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

/// A bundled problem: integrands, targets, truths and default settings.
#[derive(Clone)]
pub struct BenchProblem {
    pub name: String,
    pub default_m: Vec<usize>,
    pub truths: Vec<Truth>,
    pub targets: Vec<GaussianTarget>,
    /// Notes for the user, such as parameters outside the tested range.
    pub warnings: Vec<String>,
    integrands: Vec<Integrand>,
    defaults: fn(&[usize]) -> MethodSettings,
}

impl std::fmt::Debug for BenchProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BenchProblem")
            .field("name", &self.name)
            .field("default_m", &self.default_m)
            .field("truths", &self.truths)
            .finish()
    }
}

impl BenchProblem {
    pub fn n_tasks(&self) -> usize {
        self.integrands.len()
    }

    pub fn dim(&self) -> usize {
        self.targets[0].mean.len()
    }

    pub fn truth_values(&self) -> Vec<f64> {
        self.truths.iter().map(|t| t.value).collect()
    }

    /// Whether every task integrates against the same density.
    pub fn shared_target(&self) -> bool {
        self.targets.iter().all(|t| t == &self.targets[0])
    }

    pub fn integrand(&self, t: usize) -> &(dyn Fn(&[f64]) -> f64 + Send + Sync) {
        self.integrands[t].as_ref()
    }

    /// Default method settings for per-task sample sizes `m`.
    pub fn defaults(&self, m: &[usize]) -> MethodSettings {
        (self.defaults)(m)
    }

    pub fn taskset(&self, m: &[usize]) -> Result<TaskSet> {
        if m.len() != self.n_tasks() {
            return Err(Error::DimensionMismatch {
                expected: self.n_tasks(),
                got: m.len(),
            });
        }
        let tasks = self
            .integrands
            .iter()
            .zip(&self.targets)
            .zip(m)
            .map(|((f, g), &mt)| {
                let f = f.clone();
                Ok(IntegrationTask::new(
                    move |x| f(x),
                    gaussian_score(&g.mean, &g.variances)?,
                    Sampler::gaussian(&g.mean, &g.variances)?,
                    mt,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        TaskSet::new(tasks)
    }
}

/// Monte Carlo mean and standard error of `f` under independent Gaussian
/// coordinates.
pub fn monte_carlo_truth(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), target: &GaussianTarget, n: usize, seed: u64) -> Result<(f64, f64)> {
    use rand_distr::{Distribution, StandardNormal};
    use rayon::prelude::*;
    const CHUNK: usize = 10_000;
    let sd: Vec<f64> = target.variances.iter().map(|v| v.sqrt()).collect();
    let chunks = n.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut x = vec![0.0; sd.len()];
            for _ in 0..len {
                for (i, xi) in x.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = target.mean[i] + sd[i] * z;
                }
                let v = f(&x);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            what: "Monte Carlo truth",
            task: 0,
            sample: 0,
        });
    }
    Ok((mean, (var / n as f64).sqrt()))
}

fn tune_adam(epochs: usize, learning_rate: f64, batch: usize, lambda: f64) -> TuneConfig {
    TuneConfig {
        lambda,
        method: TuneMethod::Adam {
            epochs,
            learning_rate,
            batch: Some(batch),
            seed: 0,
        },
        ..TuneConfig::default()
    }
}

fn optim(batch: BatchSpec, learning_rate: f64, epochs: usize, lambda: f64) -> OptimConfig {
    OptimConfig {
        batch,
        learning_rate,
        epochs,
        lambda,
        ..OptimConfig::default()
    }
}

/// Low- and high-fidelity step functions under `N(0, 1)`.
pub fn problem_step() -> BenchProblem {
    let target = GaussianTarget {
        mean: vec![0.0],
        variances: vec![1.0],
    };
    BenchProblem {
        name: "step".into(),
        default_m: vec![40, 40],
        truths: vec![
            Truth {
                value: 0.5,
                provenance: Provenance::Analytic,
            },
            Truth {
                value: 0.5,
                provenance: Provenance::Analytic,
            },
        ],
        targets: vec![target.clone(), target],
        warnings: Vec::new(),
        integrands: vec![Arc::new(step_low), Arc::new(step_high)],
        defaults: step_defaults,
    }
}

pub fn step_low(x: &[f64]) -> f64 {
    if x[0] >= 0.0 {
        2.0
    } else {
        -1.0
    }
}

pub fn step_high(x: &[f64]) -> f64 {
    if x[0] >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn step_defaults(m: &[usize]) -> MethodSettings {
    let lambda = 1e-5;
    MethodSettings {
        kernel: BaseKernel::SquaredExponential { lambda: 1.0 },
        tune_scalar: Some(tune_adam(15, 0.02, 10, lambda)),
        tune_vv: Some(tune_adam(15, 0.02, 5, lambda)),
        cv: optim(BatchSpec::Total(10), 3e-4, 400, lambda),
        vv: optim(BatchSpec::PerTask(vec![5; m.len()]), 3e-4, 400, lambda),
        fixed_b: vec![0.5, 0.01, 0.01, 0.5],
        b0: vec![1.0, 0.0, 0.0, 1.0],
        cf_lambda: 1e-3,
        ..MethodSettings::default()
    }
}

/// The alternative fixed covariance for the step problem.
pub const STEP_FIXED_B_ALT: [f64; 4] = [0.1, 0.01, 0.01, 0.1];

/// Values of `σ²` the synthetic problem was designed around.
pub const SOUTH_SIGMA2: [f64; 5] = [1.0, 1.1, 1.15, 1.2, 1.25];

/// Two smooth integrands, the second under a wider Gaussian `N(0, σ²)`.
pub fn problem_south(sigma2: f64) -> Result<BenchProblem> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("σ² must be positive, got {sigma2}")));
    }
    let mut warnings = Vec::new();
    if !SOUTH_SIGMA2.contains(&sigma2) {
        warnings.push(format!("σ² = {sigma2} is outside the usual set {SOUTH_SIGMA2:?}"));
    }
    Ok(BenchProblem {
        name: "south".into(),
        default_m: vec![50, 50],
        truths: vec![
            Truth {
                value: 3.0,
                provenance: Provenance::Analytic,
            },
            Truth {
                value: 1.0 + sigma2,
                provenance: Provenance::Analytic,
            },
        ],
        targets: vec![
            GaussianTarget {
                mean: vec![0.0],
                variances: vec![1.0],
            },
            GaussianTarget {
                mean: vec![0.0],
                variances: vec![sigma2],
            },
        ],
        warnings,
        integrands: vec![Arc::new(south_f1), Arc::new(south_f2)],
        defaults: south_defaults,
    })
}

pub fn south_f1(x: &[f64]) -> f64 {
    let x = x[0];
    1.5 + x + 1.5 * x * x + 1.75 * (PI * x).sin() * (-x * x).exp()
}

pub fn south_f2(x: &[f64]) -> f64 {
    let x = x[0];
    1.0 + x + x * x + (PI * x).sin() * (-x * x).exp()
}

fn south_defaults(m: &[usize]) -> MethodSettings {
    let lambda = 1e-3;
    MethodSettings {
        kernel: BaseKernel::SquaredExponential { lambda: 1.0 },
        tune_scalar: Some(tune_adam(30, 0.05, 5, lambda)),
        tune_vv: Some(tune_adam(30, 0.05, 5, lambda)),
        cv: optim(BatchSpec::Total(5), 1e-3, 400, lambda),
        vv: optim(BatchSpec::PerTask(vec![5; m.len()]), 1e-3, 400, lambda),
        b0: vec![1.0, 0.0, 0.0, 1.0],
        fixed_b: vec![1.0, 0.0, 0.0, 1.0],
        cf_lambda: lambda,
        convex_lambda: lambda,
        ..MethodSettings::default()
    }
}

/// Input order `(r_w, r, T_u, T_l, H_u, H_l, L, K_w)`.
pub const BOREHOLE_MEAN: [f64; 8] = [0.1, 100.0, 89335.0, 89.55, 1050.0, 760.0, 1400.0, 10950.0];
/// Marginal variances, matching [`BOREHOLE_MEAN`].
pub const BOREHOLE_VAR: [f64; 8] = [0.0161812 * 0.0161812, 0.01, 20.0, 1.0, 1.0, 1.0, 10.0, 30.0];
pub const BOREHOLE_TRUTH_HIGH: f64 = 72.8904;
pub const BOREHOLE_MC_N: usize = 500_000;
pub const BOREHOLE_MC_SEED: u64 = 20_231_016;

fn borehole(x: &[f64], numer: f64, offset: f64) -> f64 {
    let [rw, r, tu, tl, hu, hl, l, kw] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]];
    let lr = (r / rw).ln();
    numer * tu * (hu - hl) / (lr * (offset + 2.0 * l * tu / (lr * rw * rw * kw) + tu / tl))
}

pub fn borehole_low(x: &[f64]) -> f64 {
    borehole(x, 5.0, 1.5)
}

pub fn borehole_high(x: &[f64]) -> f64 {
    borehole(x, 2.0 * PI, 1.0)
}

fn borehole_target() -> GaussianTarget {
    GaussianTarget {
        mean: BOREHOLE_MEAN.to_vec(),
        variances: BOREHOLE_VAR.to_vec(),
    }
}

static BOREHOLE_LOW_TRUTH: OnceLock<(f64, f64)> = OnceLock::new();

/// Low/high-fidelity borehole flow under eight independent Gaussian inputs.
///
/// The high-fidelity truth is a published reference value. The low-fidelity
/// truth is a Monte Carlo mean over [`BOREHOLE_MC_N`] draws with seed
/// [`BOREHOLE_MC_SEED`], computed once per process.
pub fn problem_borehole() -> Result<BenchProblem> {
    let target = borehole_target();
    let (low, se) = match BOREHOLE_LOW_TRUTH.get() {
        Some(v) => *v,
        None => {
            let v = monte_carlo_truth(&borehole_low, &target, BOREHOLE_MC_N, BOREHOLE_MC_SEED)?;
            *BOREHOLE_LOW_TRUTH.get_or_init(|| v)
        }
    };
    Ok(BenchProblem {
        name: "borehole".into(),
        default_m: vec![50, 50],
        truths: vec![
            Truth {
                value: low,
                provenance: Provenance::MonteCarlo {
                    n: BOREHOLE_MC_N,
                    seed: BOREHOLE_MC_SEED,
                    std_err: se,
                },
            },
            Truth {
                value: BOREHOLE_TRUTH_HIGH,
                provenance: Provenance::Reference,
            },
        ],
        targets: vec![target.clone(), target],
        warnings: Vec::new(),
        integrands: vec![Arc::new(borehole_low), Arc::new(borehole_high)],
        defaults: borehole_defaults,
    })
}

/// Step size for the vector-valued fits, by sample sizes.
fn borehole_rate(m: &[usize]) -> f64 {
    const BALANCED: [(usize, f64); 5] = [(10, 0.09), (20, 0.06), (50, 0.012), (100, 0.0035), (150, 0.002)];
    const UNBALANCED: [(usize, f64); 3] = [(20, 0.06), (40, 0.04), (60, 0.02)];
    if m.len() == 2 && m[1] == 20 {
        if let Some(&(_, r)) = UNBALANCED.iter().find(|(ml, _)| *ml == m[0]) {
            return r;
        }
    }
    let mean = m.iter().sum::<usize>() as f64 / m.len().max(1) as f64;
    BALANCED
        .iter()
        .min_by(|a, b| (a.0 as f64 - mean).abs().total_cmp(&(b.0 as f64 - mean).abs()))
        .map(|p| p.1)
        .unwrap_or(0.012)
}

fn borehole_defaults(m: &[usize]) -> MethodSettings {
    let lambda = 1e-5;
    let rate = borehole_rate(m);
    MethodSettings {
        kernel: BaseKernel::Product(
            BOREHOLE_VAR
                .iter()
                .map(|&v| BaseKernel::SquaredExponential { lambda: v })
                .collect(),
        ),
        tune_scalar: Some(tune_adam(20, 0.05, 5, lambda)),
        tune_vv: Some(tune_adam(20, 0.05, 5, lambda)),
        cv: optim(BatchSpec::Total(5), rate, 400, lambda),
        vv: optim(BatchSpec::Total(10), rate, 400, lambda),
        fixed_b: vec![5e-4, 5e-5, 5e-5, 5e-4],
        b0: vec![1e-5, 0.0, 0.0, 1e-5],
        ..MethodSettings::default()
    }
}

/// Looks a problem up by name. `south` takes `σ²` (default 1.25).
pub fn problem_by_name(name: &str, sigma2: Option<f64>) -> Result<BenchProblem> {
    match name {
        "step" => Ok(problem_step()),
        "south" => problem_south(sigma2.unwrap_or(1.25)),
        "borehole" => problem_borehole(),
        other => Err(Error::InvalidArgument(format!(
            "unknown problem '{other}', expected one of step, south, borehole"
        ))),
    }
}
