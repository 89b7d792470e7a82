//! Scalar and matrix-valued Stein reproducing kernels.
//!
//! Every matrix kernel here is separable in the output covariance `B`: its
//! value is the Hadamard product `B ∘ C(x, y)` of `B` with a `T×T` *unit
//! block* `C` that depends only on the base kernel and the task scores. The
//! unit block is what [`SteinKernel::unit_gram`] caches, so changing `B`
//! never requires re-evaluating kernel derivatives.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::BaseKernel;
use crate::types::{Dataset, Point, ScoreFn, TaskScores};

/// A symmetric positive definite `T×T` output covariance `B = L Lᵀ`.
///
/// The free parameterisation stores the lower triangle of `L` row by row,
/// with diagonal entries as logarithms so that any real vector maps to a
/// valid covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCovariance {
    b: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl TaskCovariance {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != b.ncols() || b.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "task covariance must be square and non-empty, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("task covariance has non-finite entries".into()));
        }
        let scale = b.amax().max(1.0);
        if (&b - b.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument("task covariance is not symmetric".into()));
        }
        let sym = (&b + b.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        Ok(Self { b: sym, chol })
    }

    pub fn from_rows(t: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != t * t {
            return Err(Error::DimensionMismatch {
                expected: t * t,
                got: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(t, t, entries))
    }

    pub fn identity(t: usize) -> Self {
        Self::scaled_identity(t, 1.0)
    }

    pub fn scaled_identity(t: usize, s: f64) -> Self {
        let b = DMatrix::identity(t, t) * s;
        let chol = DMatrix::identity(t, t) * s.sqrt();
        Self { b, chol }
    }

    /// Builds `B = L Lᵀ` from free parameters (see [`free_params`](Self::free_params)).
    pub fn from_free_params(t: usize, p: &[f64]) -> Result<Self> {
        let n = t * (t + 1) / 2;
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        let mut l = DMatrix::zeros(t, t);
        let mut at = 0;
        for i in 0..t {
            for j in 0..=i {
                l[(i, j)] = if i == j { p[at].exp() } else { p[at] };
                at += 1;
            }
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariance parameters overflow".into()));
        }
        let b = &l * l.transpose();
        let b = (&b + b.transpose()) * 0.5;
        Ok(Self { b, chol: l })
    }

    /// Lower triangle of `L`, row by row, diagonal entries as logs.
    pub fn free_params(&self) -> Vec<f64> {
        let t = self.dim();
        let mut out = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            for j in 0..=i {
                let v = self.chol[(i, j)];
                out.push(if i == j { v.ln() } else { v });
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }
}

/// Which Stein construction a [`SteinKernel`] uses.
#[derive(Clone, Debug)]
pub enum SteinForm {
    /// First-order Langevin operator applied to `B k`, one score per task.
    FirstOrder { base: BaseKernel, scores: Vec<ScoreFn> },
    /// All tasks share one target, so the kernel is `B k₀(x, y)`.
    SharedTarget { base: BaseKernel, score: ScoreFn },
    /// Second-order (Laplacian based) operator applied to `B k`.
    SecondOrder { base: BaseKernel, scores: Vec<ScoreFn> },
    /// Closed forms for the polynomial base kernel with degree 1 or 2.
    PolynomialClosed {
        c: f64,
        degree: u32,
        order: u8,
        scores: Vec<ScoreFn>,
    },
}

/// A matrix-valued Stein kernel `K₀(x, y) = B ∘ C(x, y)`.
#[derive(Clone, Debug)]
pub struct SteinKernel {
    form: SteinForm,
    cov: TaskCovariance,
}

/// Scalar Langevin Stein kernel
/// `∇_x·∇_y k + s(x)·∇_y k + s(y)·∇_x k + s(x)·s(y) k`.
pub fn k0_scalar(k: &BaseKernel, score: &ScoreFn, x: &[f64], y: &[f64]) -> Result<f64> {
    let sx = score.eval(x)?;
    let sy = score.eval(y)?;
    let t = k.first_order(x, y)?;
    Ok(k0_from_terms(&t, &sx, &sy))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn k0_from_terms(t: &crate::kernels::FirstOrderTerms, sx: &[f64], sy: &[f64]) -> f64 {
    t.div_xy + dot(sx, &t.grad_y) + dot(sy, &t.grad_x) + dot(sx, sy) * t.k
}

/// Cached unit blocks `C(x_a, x_b)` for every pair of points.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitGram {
    rows: usize,
    cols: usize,
    t: usize,
    data: Vec<f64>,
}

impl UnitGram {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_tasks(&self) -> usize {
        self.t
    }

    /// The `T×T` unit block for points `a` and `b`, row-major.
    pub fn block(&self, a: usize, b: usize) -> &[f64] {
        let tt = self.t * self.t;
        let at = (a * self.cols + b) * tt;
        &self.data[at..at + tt]
    }

    /// Entry `(t, t')` of the unit block for points `a` and `b`.
    pub fn entry(&self, a: usize, b: usize, t: usize, tp: usize) -> f64 {
        self.data[(a * self.cols + b) * self.t * self.t + t * self.t + tp]
    }

    /// Full `(rows·T) × (cols·T)` Gram matrix `B ∘ C` with row index
    /// `point · T + task`.
    pub fn apply(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self.t;
        DMatrix::from_fn(self.rows * t, self.cols * t, |i, j| {
            let (a, ta) = (i / t, i % t);
            let (c, tc) = (j / t, j % t);
            b[(ta, tc)] * self.entry(a, c, ta, tc)
        })
    }
}

impl SteinKernel {
    pub fn new(form: SteinForm, cov: TaskCovariance) -> Result<Self> {
        let t = cov.dim();
        let (base_dim, scores): (Option<usize>, Vec<&ScoreFn>) = match &form {
            SteinForm::FirstOrder { base, scores } | SteinForm::SecondOrder { base, scores } => {
                base.validate()?;
                (base.fixed_dim(), scores.iter().collect())
            }
            SteinForm::SharedTarget { base, score } => {
                base.validate()?;
                (base.fixed_dim(), vec![score])
            }
            SteinForm::PolynomialClosed {
                c,
                degree,
                order,
                scores,
            } => {
                if !(1..=2).contains(degree) {
                    return Err(Error::InvalidArgument(format!(
                        "closed-form polynomial kernels need degree 1 or 2, got {degree}"
                    )));
                }
                if !(1..=2).contains(order) {
                    return Err(Error::InvalidArgument(format!(
                        "Stein operator order must be 1 or 2, got {order}"
                    )));
                }
                if !c.is_finite() {
                    return Err(Error::InvalidArgument("polynomial offset must be finite".into()));
                }
                (None, scores.iter().collect())
            }
        };
        if !matches!(form, SteinForm::SharedTarget { .. }) && scores.len() != t {
            return Err(Error::InvalidArgument(format!(
                "{} scores for a {t}x{t} task covariance",
                scores.len()
            )));
        }
        let d = scores[0].dim();
        if let Some(s) = scores.iter().find(|s| s.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.dim(),
            });
        }
        if let Some(bd) = base_dim {
            if bd != d {
                return Err(Error::DimensionMismatch { expected: bd, got: d });
            }
        }
        if let SteinForm::SecondOrder { base, .. } = &form {
            if !base.has_second_partials() {
                return Err(Error::Unsupported(format!(
                    "second-order Stein kernel with a {} base kernel",
                    base.name()
                )));
            }
        }
        Ok(Self { form, cov })
    }

    /// Scalar Stein kernel `k₀` as a `1×1` matrix kernel.
    pub fn scalar(base: BaseKernel, score: ScoreFn) -> Result<Self> {
        Self::new(
            SteinForm::FirstOrder {
                base,
                scores: vec![score],
            },
            TaskCovariance::identity(1),
        )
    }

    pub fn first_order(base: BaseKernel, scores: Vec<ScoreFn>, cov: TaskCovariance) -> Result<Self> {
        Self::new(SteinForm::FirstOrder { base, scores }, cov)
    }

    pub fn shared_target(base: BaseKernel, score: ScoreFn, cov: TaskCovariance) -> Result<Self> {
        Self::new(SteinForm::SharedTarget { base, score }, cov)
    }

    pub fn second_order(base: BaseKernel, scores: Vec<ScoreFn>, cov: TaskCovariance) -> Result<Self> {
        Self::new(SteinForm::SecondOrder { base, scores }, cov)
    }

    pub fn polynomial_closed(
        c: f64,
        degree: u32,
        order: u8,
        scores: Vec<ScoreFn>,
        cov: TaskCovariance,
    ) -> Result<Self> {
        Self::new(
            SteinForm::PolynomialClosed {
                c,
                degree,
                order,
                scores,
            },
            cov,
        )
    }

    pub fn form(&self) -> &SteinForm {
        &self.form
    }

    pub fn cov(&self) -> &TaskCovariance {
        &self.cov
    }

    pub fn n_tasks(&self) -> usize {
        self.cov.dim()
    }

    pub fn dim(&self) -> usize {
        self.score_fns()[0].dim()
    }

    /// The base kernel, if the form has an explicit one.
    pub fn base(&self) -> Option<&BaseKernel> {
        match &self.form {
            SteinForm::FirstOrder { base, .. }
            | SteinForm::SharedTarget { base, .. }
            | SteinForm::SecondOrder { base, .. } => Some(base),
            SteinForm::PolynomialClosed { .. } => None,
        }
    }

    pub fn score_fns(&self) -> Vec<&ScoreFn> {
        match &self.form {
            SteinForm::FirstOrder { scores, .. }
            | SteinForm::SecondOrder { scores, .. }
            | SteinForm::PolynomialClosed { scores, .. } => scores.iter().collect(),
            SteinForm::SharedTarget { score, .. } => vec![score],
        }
    }

    pub fn with_cov(&self, cov: TaskCovariance) -> Result<Self> {
        Self::new(self.form.clone(), cov)
    }

    /// Same construction with a different base kernel.
    pub fn with_base(&self, base: BaseKernel) -> Result<Self> {
        let form = match &self.form {
            SteinForm::FirstOrder { scores, .. } => SteinForm::FirstOrder {
                base,
                scores: scores.clone(),
            },
            SteinForm::SharedTarget { score, .. } => SteinForm::SharedTarget {
                base,
                score: score.clone(),
            },
            SteinForm::SecondOrder { scores, .. } => SteinForm::SecondOrder {
                base,
                scores: scores.clone(),
            },
            SteinForm::PolynomialClosed { .. } => {
                return Err(Error::Unsupported(
                    "closed-form polynomial kernels have no separate base kernel".into(),
                ))
            }
        };
        Self::new(form, self.cov.clone())
    }

    /// Scores of this kernel's targets at `x`.
    pub fn scores_at(&self, x: &[f64]) -> Result<TaskScores> {
        self.score_fns().iter().map(|s| s.eval(x)).collect()
    }

    /// `K₀(x, y)` as a `T×T` matrix.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let c = self.unit_block(x, y)?;
        Ok(self.cov.b().component_mul(&c))
    }

    /// The unit block `C(x, y)`, so that `K₀ = B ∘ C`.
    pub fn unit_block(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let lx = self.scores_at(x)?;
        let ly = self.scores_at(y)?;
        let t = self.n_tasks();
        let mut out = vec![0.0; t * t];
        self.fill_unit_block(x, y, &lx, &ly, &mut out)?;
        Ok(DMatrix::from_row_slice(t, t, &out))
    }

    /// Writes `C(x, y)` row-major into `out`, given the task scores at both
    /// points. For a shared target only the first score of each list is read.
    pub fn fill_unit_block(
        &self,
        x: &[f64],
        y: &[f64],
        lx: &[Vec<f64>],
        ly: &[Vec<f64>],
        out: &mut [f64],
    ) -> Result<()> {
        let t = self.n_tasks();
        let d = x.len();
        match &self.form {
            SteinForm::FirstOrder { base, .. } => {
                let terms = base.first_order(x, y)?;
                for a in 0..t {
                    let sx_gy = dot(&lx[a], &terms.grad_y);
                    for b in 0..t {
                        out[a * t + b] = terms.div_xy
                            + sx_gy
                            + dot(&ly[b], &terms.grad_x)
                            + dot(&lx[a], &ly[b]) * terms.k;
                    }
                }
            }
            SteinForm::SharedTarget { base, .. } => {
                let terms = base.first_order(x, y)?;
                let v = k0_from_terms(&terms, &lx[0], &ly[0]);
                out[..t * t].iter_mut().for_each(|o| *o = v);
            }
            SteinForm::SecondOrder { base, .. } => {
                let sp = base.second_partials(x, y)?;
                let d_sum: f64 = sp.xxyy.iter().sum();
                // Σ_s ∂x_s²∂y_r k, indexed by r, and Σ_r ∂x_s∂y_r² k, indexed by s
                let mut a_r = vec![0.0; d];
                let mut c_s = vec![0.0; d];
                for s in 0..d {
                    for r in 0..d {
                        a_r[r] += sp.xxy[s * d + r];
                        c_s[s] += sp.xyy[s * d + r];
                    }
                }
                for a in 0..t {
                    let x_term = dot(&lx[a], &c_s);
                    for b in 0..t {
                        let mut h = 0.0;
                        for s in 0..d {
                            for r in 0..d {
                                h += lx[a][s] * ly[b][r] * sp.xy[s * d + r];
                            }
                        }
                        out[a * t + b] = d_sum + dot(&ly[b], &a_r) + x_term + h;
                    }
                }
            }
            SteinForm::PolynomialClosed {
                c, degree, order, ..
            } => {
                let xy = dot(x, y);
                let b0 = xy + c;
                let df = d as f64;
                for a in 0..t {
                    let lxx = dot(&lx[a], x);
                    for b in 0..t {
                        let lyy = dot(&ly[b], y);
                        let ll = dot(&lx[a], &ly[b]);
                        out[a * t + b] = match (order, degree) {
                            (1, 1) => df + lyy + lxx + ll * b0,
                            (1, 2) => {
                                2.0 * xy + 2.0 * df * b0 + 2.0 * b0 * (lyy + lxx) + ll * b0 * b0
                            }
                            (2, 1) => ll,
                            (2, 2) => {
                                // Σ_{r,s} l_s(x) l_r(y) x_r y_s = (l(x)·y)(l(y)·x)
                                let cross = dot(&lx[a], y) * dot(&ly[b], x);
                                4.0 * (df + lyy + lxx) + 2.0 * (ll * b0 + cross)
                            }
                            _ => unreachable!("validated at construction"),
                        };
                    }
                }
            }
        }
        Ok(())
    }

    /// Unit blocks for all pairs of `rows × cols`, given their task scores.
    ///
    /// When `symmetric` is set the two lists must be identical; each block
    /// is then computed once and mirrored by `C(y, x) = C(x, y)ᵀ`.
    pub fn unit_gram_scored(
        &self,
        rows: &[Point],
        row_scores: &[TaskScores],
        cols: &[Point],
        col_scores: &[TaskScores],
        symmetric: bool,
    ) -> Result<UnitGram> {
        let t = self.n_tasks();
        let tt = t * t;
        let (nr, nc) = (rows.len(), cols.len());
        if row_scores.len() != nr || col_scores.len() != nc {
            return Err(Error::InvalidArgument("one score set per point is required".into()));
        }
        if symmetric && nr != nc {
            return Err(Error::InvalidArgument("symmetric Gram needs square input".into()));
        }
        let mut data = vec![0.0; nr * nc * tt];
        data.par_chunks_mut(nc * tt)
            .enumerate()
            .try_for_each(|(a, row)| -> Result<()> {
                let start = if symmetric { a } else { 0 };
                for b in start..nc {
                    self.fill_unit_block(
                        &rows[a],
                        &cols[b],
                        &row_scores[a],
                        &col_scores[b],
                        &mut row[b * tt..(b + 1) * tt],
                    )
                    .map_err(|e| Error::Block {
                        row: a,
                        col: b,
                        source: Box::new(e),
                    })?;
                }
                Ok(())
            })?;
        if symmetric {
            for a in 0..nr {
                for b in 0..a {
                    for i in 0..t {
                        for j in 0..t {
                            data[(a * nc + b) * tt + i * t + j] = data[(b * nc + a) * tt + j * t + i];
                        }
                    }
                }
            }
        }
        Ok(UnitGram {
            rows: nr,
            cols: nc,
            t,
            data,
        })
    }

    /// Unit blocks between two point lists, evaluating scores on the fly.
    pub fn unit_gram(&self, rows: &[Point], cols: &[Point]) -> Result<UnitGram> {
        let rs: Result<Vec<TaskScores>> = rows.par_iter().map(|p| self.scores_at(p)).collect();
        let rs = rs?;
        let same = rows.len() == cols.len() && rows.iter().zip(cols).all(|(a, b)| a == b);
        if same {
            return self.unit_gram_scored(rows, &rs, cols, &rs, true);
        }
        let cs: Result<Vec<TaskScores>> = cols.par_iter().map(|p| self.scores_at(p)).collect();
        self.unit_gram_scored(rows, &rs, cols, &cs?, false)
    }

    /// Unit blocks over all points of a dataset, using its score cache.
    pub fn unit_gram_dataset(&self, data: &Dataset) -> Result<UnitGram> {
        self.check_dataset(data)?;
        let s = data.scores()?;
        self.unit_gram_scored(data.points(), s, data.points(), s, true)
    }

    /// Block Gram matrix `[K₀(x_a, y_b)]` with row index `point · T + task`.
    pub fn gram(&self, rows: &[Point], cols: &[Point]) -> Result<DMatrix<f64>> {
        Ok(self.unit_gram(rows, cols)?.apply(self.cov.b()))
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let needed = match self.form {
            SteinForm::SharedTarget { .. } => 1,
            _ => self.n_tasks(),
        };
        if data.n_tasks() < needed {
            return Err(Error::InvalidArgument(format!(
                "kernel needs scores for {needed} tasks, dataset has {}",
                data.n_tasks()
            )));
        }
        Ok(())
    }
}

/// Per-task summary produced by [`integrability_diagnostic`].
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDiagnostic {
    pub task: usize,
    pub samples: usize,
    /// Empirical mean of `‖∇ log π_t‖²` over the task's samples.
    pub mean_sq_score: f64,
    pub max_abs_kernel: f64,
    pub max_abs_grad: f64,
    pub max_abs_div: f64,
    /// Top decile of `‖score‖²` carries more than 90% of the total.
    pub heavy_tailed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrabilityReport {
    pub rows: Vec<TaskDiagnostic>,
}

impl IntegrabilityReport {
    pub fn warnings(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.heavy_tailed)
            .map(|r| {
                format!(
                    "task {}: squared scores look heavy-tailed (top decile holds over 90% of the mass)",
                    r.task
                )
            })
            .collect()
    }
}

/// Empirical checks of the conditions under which the Stein identity holds:
/// bounded kernel derivatives and finite score second moments. Advisory only.
pub fn integrability_diagnostic(kernel: &SteinKernel, data: &Dataset) -> Result<IntegrabilityReport> {
    kernel.check_dataset(data)?;
    let scores = data.scores()?;
    let shared = matches!(kernel.form(), SteinForm::SharedTarget { .. });
    let mut rows = Vec::with_capacity(data.n_tasks());
    for t in 0..data.n_tasks() {
        let range = data.task_range(t);
        let st = if shared { 0 } else { t.min(kernel.n_tasks() - 1) };
        let mut sq: Vec<f64> = range
            .clone()
            .map(|i| scores[i][st].iter().map(|v| v * v).sum())
            .collect();
        let total: f64 = sq.iter().sum();
        let mean = total / sq.len() as f64;
        sq.sort_by(|a, b| b.total_cmp(a));
        let top = sq.len().div_ceil(10);
        let top_sum: f64 = sq[..top].iter().sum();
        let heavy = sq.len() >= 10 && total > 0.0 && top_sum > 0.9 * total;

        let (mut mk, mut mg, mut md) = (0.0f64, 0.0f64, 0.0f64);
        if let Some(base) = kernel.base() {
            let pts = data.task_points(t);
            for x in pts {
                for y in pts {
                    let f = base.first_order(x, y)?;
                    mk = mk.max(f.k.abs());
                    mg = f.grad_x.iter().chain(&f.grad_y).fold(mg, |m, v| m.max(v.abs()));
                    md = md.max(f.div_xy.abs());
                }
            }
        }
        rows.push(TaskDiagnostic {
            task: t,
            samples: range.len(),
            mean_sq_score: mean,
            max_abs_kernel: mk,
            max_abs_grad: mg,
            max_abs_div: md,
            heavy_tailed: heavy,
        });
    }
    Ok(IntegrabilityReport { rows })
}
