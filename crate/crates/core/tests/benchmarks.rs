use vvcv::bench::{
    fit_method, monte_carlo_truth, problem_borehole, problem_south, problem_step, rep_seed, run_method, BenchProblem,
    BenchRecord, Method, Provenance, RunSpec,
};
use vvcv::types::build_dataset;

fn check_truths(p: &BenchProblem, seed: u64) {
    for t in 0..p.n_tasks() {
        let (mean, se) = monte_carlo_truth(p.integrand(t), &p.targets[t], 1_000_000, seed).unwrap();
        let truth = &p.truths[t];
        let spread = match truth.provenance {
            Provenance::MonteCarlo { std_err, .. } => (se * se + std_err * std_err).sqrt(),
            _ => se,
        };
        assert!(
            (mean - truth.value).abs() <= 4.0 * spread,
            "{} task {t}: sample mean {mean} (se {se}) vs truth {}",
            p.name,
            truth.value
        );
    }
}

#[test]
fn truths_agree_with_large_samples() {
    check_truths(&problem_step(), 1);
    for s2 in [1.0, 1.1, 1.15, 1.2, 1.25] {
        check_truths(&problem_south(s2).unwrap(), 2);
    }
    check_truths(&problem_borehole().unwrap(), 3);
}

fn mc_errors(p: &BenchProblem, m: usize) -> Vec<f64> {
    let settings = p.defaults(&[m, m]);
    let spec = RunSpec {
        problem: p,
        method: Method::Mc,
        m: vec![m, m],
        reps: 200,
        seed: 17,
        settings: &settings,
        trace: false,
        config_digest: String::new(),
    };
    let errs: Vec<Vec<f64>> = run_method(&spec)
        .unwrap()
        .records
        .iter()
        .filter_map(BenchRecord::abs_errors)
        .collect();
    (0..2).map(|t| errs.iter().map(|e| e[t]).sum::<f64>() / errs.len() as f64).collect()
}

#[test]
fn monte_carlo_error_shrinks_like_root_m() {
    let p = problem_step();
    let small = mc_errors(&p, 40);
    let large = mc_errors(&p, 80);
    for t in 0..2 {
        let ratio = small[t] / large[t];
        assert!((1.2..=1.7).contains(&ratio), "task {t}: ratio {ratio}");
    }
}

#[test]
fn step_tasks_are_learned_as_positively_related() {
    let p = problem_step();
    let m = [40, 40];
    let settings = p.defaults(&m);
    let taskset = p.taskset(&m).unwrap();
    for rep in 0..5 {
        let seed = rep_seed(1, rep);
        let data = build_dataset(&taskset, seed).unwrap();
        let out = fit_method(Method::VvEstB, &data, &settings, seed).unwrap();
        let b = out.cov.unwrap();
        assert!(b.b()[(0, 1)] > 0.0, "rep {rep}: B = {}", b.b());
    }
}
