//! Benchmark problems with known answers, method runners and CSV reports.

pub mod methods;
pub mod problems;
pub mod report;
pub mod settings;

pub use methods::{check_method, fit_method, rep_seed, run_method, FitOutcome, BenchRecord, Method, MethodRun, RunSpec, TraceRecord};
pub use problems::{
    monte_carlo_truth, problem_borehole, problem_by_name, problem_south, problem_step, BenchProblem, GaussianTarget,
    Provenance, Truth,
};
pub use report::{summarize, write_raw, write_summary, write_trace, SummaryRow};
pub use settings::MethodSettings;
