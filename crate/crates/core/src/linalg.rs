//! Symmetric positive (semi-)definite solves with a jitter ladder.
//!
//! A Cholesky factorisation is attempted with diagonal jitter
//! `0, 1e-12, 1e-10, 1e-8, 1e-6` times the mean diagonal. If every rung
//! fails, an SVD pseudo-inverse is used instead.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

enum Inner {
    Chol(Cholesky<f64, Dyn>),
    Pinv(DMatrix<f64>),
}

/// A reusable factorisation of a symmetric matrix.
pub struct SpdFactor {
    inner: Inner,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
    n: usize,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor")
            .field("n", &self.n)
            .field("jitter", &self.jitter)
            .field("pseudo_inverse", &self.is_pseudo_inverse())
            .finish()
    }
}

fn mean_diag_scale(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1);
    let m = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Ratio of extreme singular values, used in error reports.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

impl SpdFactor {
    /// Factorises `a`, walking the jitter ladder and falling back to a
    /// pseudo-inverse.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let f = Self::cholesky_only(a);
        match f {
            Ok(f) => Ok(f),
            Err(_) => Self::pseudo_inverse(a),
        }
    }

    /// Like [`new`](Self::new) but without the pseudo-inverse fallback, for
    /// callers that need a log-determinant.
    pub fn cholesky_only(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                condition: f64::INFINITY,
            });
        }
        let scale = mean_diag_scale(a);
        for rel in JITTER_LADDER {
            let jitter = rel * scale;
            let mut m = a.clone();
            if jitter > 0.0 {
                for i in 0..m.nrows() {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(c) = m.cholesky() {
                if c.l_dirty().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
                    return Ok(Self {
                        inner: Inner::Chol(c),
                        jitter,
                        n: a.nrows(),
                    });
                }
            }
        }
        Err(Error::Numerical {
            condition: condition_estimate(a),
        })
    }

    fn pseudo_inverse(a: &DMatrix<f64>) -> Result<Self> {
        let cond = condition_estimate(a);
        let svd = a.clone().svd(true, true);
        let tol = f64::EPSILON * a.nrows() as f64 * svd.singular_values.max();
        let p = svd
            .pseudo_inverse(tol)
            .map_err(|_| Error::Numerical { condition: cond })?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { condition: cond });
        }
        Ok(Self {
            inner: Inner::Pinv(p),
            jitter: 0.0,
            n: a.nrows(),
        })
    }

    pub fn is_pseudo_inverse(&self) -> bool {
        matches!(self.inner, Inner::Pinv(_))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            Inner::Chol(c) => c.solve(b),
            Inner::Pinv(p) => p * b,
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            Inner::Chol(c) => c.solve(b),
            Inner::Pinv(p) => p * b,
        }
    }

    /// `log det` of the (jittered) matrix; unavailable for a pseudo-inverse.
    pub fn log_det(&self) -> Result<f64> {
        match &self.inner {
            Inner::Chol(c) => Ok(2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()),
            Inner::Pinv(_) => Err(Error::Numerical {
                condition: f64::INFINITY,
            }),
        }
    }
}

/// Solves `a x = b` for symmetric `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(SpdFactor::new(a)?.solve(b))
}

/// Symmetric matrix function `f(A) = V diag(f(λ)) Vᵀ`.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Pairwise (cascade) summation, which keeps rounding error logarithmic in
/// the length and makes the result independent of how work was split.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
