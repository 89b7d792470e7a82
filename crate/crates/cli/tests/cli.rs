use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vvcv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvcv"))
        .args(args)
        .env("VVCV_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_writes_both_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = vvcv(&[
        "bench", "step", "--m", "40,40", "--reps", "20", "--seed", "1", "--methods", "mc,cf,vvcv-estb", "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(raw.lines().next().unwrap(), "problem,method,m,rep,seed,task,estimate,abs_err,seconds");
    assert_eq!(raw.lines().count(), 1 + 3 * 20 * 2);
    assert_eq!(
        summary.lines().next().unwrap(),
        "problem,method,m,task,mean_abs_err,sd,se,mean_seconds,reps"
    );
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
    assert!(!dir.path().join("trace.csv").exists());
    assert_eq!(fs::read_to_string(dir.path().join("digest.txt")).unwrap().trim().len(), 64);
}

#[test]
fn missing_problem_is_a_config_error() {
    let out = vvcv(&["bench"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vvcv(&["bench", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vvcv(&["bench", "step", "--reps", "many"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vvcv(&["bench", "south", "--methods", "vvcv-convexb"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "problem = \"step\"\n[settings.vv]\nrate = 1.0\n").unwrap();
    let out = vvcv(&["bench", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_and_resolved_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "bench".to_string(),
            "step".into(),
            "--m".into(),
            "12,12".into(),
            "--reps".into(),
            "3".into(),
            "--seed".into(),
            "9".into(),
            "--methods".into(),
            "mc,cv,vvcv-fixedb".into(),
            "--no-timing".into(),
            "--trace".into(),
            "--out".into(),
            d.to_str().unwrap().into(),
        ]
    };
    let run = |d: &Path| {
        let v = args(d);
        let r: Vec<&str> = v.iter().map(String::as_str).collect();
        let o = vvcv(&r);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(a.path());
    run(b.path());
    for f in ["raw.csv", "summary.csv", "trace.csv", "digest.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(a.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "problem,method,m,rep,seed,epoch,task,estimate,abs_err");

    let resolved = a.path().join("resolved.toml");
    let o = vvcv(&["bench", "--config", path(&resolved), "--out", path(c.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["raw.csv", "summary.csv", "trace.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(c.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn divergence_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "problem = \"step\"\nmethods = [\"vvcv-fixedb\"]\nreps = 2\nm = [10, 10]\n\
         [settings]\ntune = false\n[settings.vv]\nlearning_rate = 1000.0\nlambda = 10.0\nepochs = 5\ndivergence_factor = 1.0\n",
    )
    .unwrap();
    let out = vvcv(&["bench", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_task(dir: &Path, name: &str, rows: &[(f64, f64)]) {
    let mut s = String::from("x_1,f\n");
    for (x, f) in rows {
        s.push_str(&format!("{x},{f}\n"));
    }
    fs::write(dir.join(name), s).unwrap();
}

fn fit_config(dir: &Path, method: &str) -> std::path::PathBuf {
    let cfg = dir.join("fit.toml");
    fs::write(
        &cfg,
        format!(
            "methods = [\"{method}\"]\n[fit]\ndim = 1\nfiles = [\"a.csv\", \"b.csv\"]\n\
             scores = [{{ gaussian = {{ mean = [0.0], variances = [1.0] }} }}, {{ gaussian = {{ mean = [0.0], variances = [1.25] }} }}]\n\
             [settings]\ntiming = false\n[settings.vv]\nbatch = {{ total = 4 }}\nepochs = 20\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn fit_closed_form_on_two_tiny_tasks() {
    let dir = tempfile::tempdir().unwrap();
    write_task(dir.path(), "a.csv", &[(-0.5, 1.0), (0.1, 2.0), (0.9, 0.5)]);
    write_task(dir.path(), "b.csv", &[(-1.0, 0.0), (0.3, 1.0), (1.2, 3.0)]);
    let cfg = fit_config(dir.path(), "cf");
    let out_dir = dir.path().join("out");
    let o = vvcv(&["fit", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 3);
}

#[test]
fn fit_constant_integrand_returns_the_constant() {
    let dir = tempfile::tempdir().unwrap();
    write_task(dir.path(), "a.csv", &[(-0.5, 4.0), (0.1, 4.0), (0.9, 4.0)]);
    write_task(dir.path(), "b.csv", &[(-1.0, 4.0), (0.3, 4.0), (1.2, 4.0)]);
    let cfg = fit_config(dir.path(), "cf");
    let out_dir = dir.path().join("out");
    assert!(vvcv(&["fit", "--config", path(&cfg), "--out", path(&out_dir)]).status.success());
    let est = fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    for line in est.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - 4.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn fit_learned_covariance_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_task(dir.path(), "a.csv", &[(-0.5, 1.0), (0.1, 2.0), (0.9, 0.5), (1.4, 0.2)]);
    write_task(dir.path(), "b.csv", &[(-1.0, 0.0), (0.3, 1.0), (1.2, 3.0), (-0.2, 1.1)]);
    let cfg = fit_config(dir.path(), "vvcv-estb");
    let out_dir = dir.path().join("out");
    let o = vvcv(&["fit", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model: toml::Table = toml::from_str(&fs::read_to_string(out_dir.join("model.toml")).unwrap()).unwrap();
    let b = model["b"].as_array().unwrap();
    let get = |i: usize, j: usize| b[i].as_array().unwrap()[j].as_float().unwrap();
    assert_eq!(get(0, 1), get(1, 0));
    assert!(get(0, 0) > 0.0 && get(0, 0) * get(1, 1) - get(0, 1).powi(2) > 0.0);
}

#[test]
fn fit_reports_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    write_task(dir.path(), "a.csv", &[(-0.5, 1.0), (0.1, 2.0)]);
    fs::write(dir.path().join("b.csv"), "x_1,f\n0.1,1.0\n0.2,1.0,7.0\n").unwrap();
    let cfg = fit_config(dir.path(), "cf");
    let o = vvcv(&["fit", "--config", path(&cfg), "--out", path(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}
