//! Vector-valued control variates for estimating several related integrals
//! at once.
//!
//! Each task pairs an integrand with a target density known through its
//! score function. A matrix-valued Stein kernel `K₀ = B ∘ C` produces
//! functions whose `t`-th output has mean zero under task `t`'s target. These
//! are fitted jointly to all integrands and subtracted, and the task
//! covariance `B` lets related tasks share information.
//!
//! * [`kernels`]: base kernels and their closed-form derivatives
//! * [`stein`]: scalar and matrix-valued Stein kernels, task covariances
//! * [`types`]: scores, samplers, tasks and datasets
//! * [`model`]: the fitted model, objectives and estimators
//! * [`solvers`]: exact, stochastic and convex fitting
//! * [`tuning`]: marginal-likelihood hyperparameter search
//! * [`bench`]: benchmark problems, method runners and CSV reports
//!
//! A quadratic integrand lies in the span of the degree-two polynomial Stein
//! kernel, so its integral is recovered almost exactly from 25 points:
//!
//! ```
//! use vvcv::kernels::BaseKernel;
//! use vvcv::model::estimate_beta;
//! use vvcv::solvers::fit_exact_joint;
//! use vvcv::stein::{SteinKernel, TaskCovariance};
//! use vvcv::types::{build_dataset, gaussian_score, IntegrationTask, Sampler, TaskSet};
//!
//! let task = IntegrationTask::new(
//!     |x: &[f64]| x[0] * x[0],
//!     gaussian_score(&[0.0], &[1.0]).unwrap(),
//!     Sampler::gaussian(&[0.0], &[1.0]).unwrap(),
//!     25,
//! );
//! let data = build_dataset(&TaskSet::new(vec![task.clone(), task]).unwrap(), 0).unwrap();
//! let kernel = SteinKernel::first_order(
//!     BaseKernel::polynomial(1.0, 2).unwrap(),
//!     data.score_fns().to_vec(),
//!     TaskCovariance::identity(2),
//! )
//! .unwrap();
//! let model = fit_exact_joint(&kernel, &data, 1e-4).unwrap();
//! assert!(estimate_beta(&model).iter().all(|b| (b - 1.0).abs() < 1e-3));
//! ```

pub mod error;
pub mod kernels;
pub mod types;
pub mod stein;
pub mod linalg;
pub mod model;
pub mod solvers;
pub mod tuning;
pub mod bench;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/stein-kernels.md")]
    mod stein_kernels {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/covariance.md")]
    mod covariance {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
