//! Scalar base kernels `k(x, y)` and the derivatives a Stein kernel needs.
//!
//! Four families are provided:
//!
//! * polynomial `(xᵀy + c)^l`,
//! * squared-exponential `exp(−‖x − y‖² / (2λ))`, where `λ` is the
//!   *squared* lengthscale,
//! * preconditioned squared-exponential
//!   `exp(−‖x − y‖² / (2ℓ²)) / ((1 + α‖x‖²)(1 + α‖y‖²))`, where `ℓ` is the
//!   lengthscale itself,
//! * products `∏_j k_j(x_j, y_j)` of one-dimensional factors, which give each
//!   coordinate its own hyperparameters.
//!
//! All derivatives are closed forms. Third and fourth order mixed partials are
//! available for every family except the preconditioned kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseKernel {
    Polynomial { c: f64, degree: u32 },
    /// `lambda` divides the squared distance, i.e. it is `ℓ²`.
    SquaredExponential { lambda: f64 },
    PreconditionedSe { lengthscale: f64, alpha: f64 },
    /// One factor per input coordinate; every factor is one-dimensional.
    Product(Vec<BaseKernel>),
}

/// Value, gradients and `∇_x·∇_y k` at one pair of points.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderTerms {
    pub k: f64,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub div_xy: f64,
}

/// Mixed partials needed by the second-order Stein kernel, stored row-major
/// with index `s * d + r`:
///
/// * `xy[s, r]   = ∂x_s ∂y_r k`
/// * `xxy[s, r]  = ∂x_s² ∂y_r k`
/// * `xyy[s, r]  = ∂x_s ∂y_r² k`
/// * `xxyy[s, r] = ∂x_s² ∂y_r² k`
#[derive(Clone, Debug, PartialEq)]
pub struct SecondPartials {
    pub dim: usize,
    pub xy: Vec<f64>,
    pub xxy: Vec<f64>,
    pub xyy: Vec<f64>,
    pub xxyy: Vec<f64>,
}

impl SecondPartials {
    fn zeros(d: usize) -> Self {
        Self {
            dim: d,
            xy: vec![0.0; d * d],
            xxy: vec![0.0; d * d],
            xyy: vec![0.0; d * d],
            xxyy: vec![0.0; d * d],
        }
    }

    pub fn at(&self, s: usize, r: usize) -> [f64; 4] {
        let i = s * self.dim + r;
        [self.xy[i], self.xxy[i], self.xyy[i], self.xxyy[i]]
    }
}

/// All partials of a one-dimensional factor up to `∂x²∂y²`.
#[derive(Clone, Copy, Debug, Default)]
struct Partials1d {
    k: f64,
    x: f64,
    y: f64,
    xx: f64,
    yy: f64,
    xy: f64,
    xxy: f64,
    xyy: f64,
    xxyy: f64,
}

/// `l (l−1) ⋯ (l−n+1) b^{l−n}`, zero when `n > l`.
fn falling_power(degree: u32, n: u32, base: f64) -> f64 {
    if n > degree {
        return 0.0;
    }
    let coef: f64 = (0..n).map(|i| f64::from(degree - i)).product();
    coef * base.powi((degree - n) as i32)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl BaseKernel {
    pub fn polynomial(c: f64, degree: u32) -> Result<Self> {
        let k = BaseKernel::Polynomial { c, degree };
        k.validate()?;
        Ok(k)
    }

    pub fn squared_exponential(lambda: f64) -> Result<Self> {
        let k = BaseKernel::SquaredExponential { lambda };
        k.validate()?;
        Ok(k)
    }

    pub fn preconditioned_se(lengthscale: f64, alpha: f64) -> Result<Self> {
        let k = BaseKernel::PreconditionedSe { lengthscale, alpha };
        k.validate()?;
        Ok(k)
    }

    pub fn product(factors: Vec<BaseKernel>) -> Result<Self> {
        let k = BaseKernel::Product(factors);
        k.validate()?;
        Ok(k)
    }

    /// A product of one-dimensional squared-exponential factors.
    pub fn product_se(lambdas: &[f64]) -> Result<Self> {
        Self::product(
            lambdas
                .iter()
                .map(|&l| BaseKernel::SquaredExponential { lambda: l })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BaseKernel::Polynomial { c, .. } => {
                if c.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "polynomial offset must be finite, got {c}"
                    )))
                }
            }
            BaseKernel::SquaredExponential { lambda } => check_positive("lengthscale", *lambda),
            BaseKernel::PreconditionedSe { lengthscale, alpha } => {
                check_positive("lengthscale", *lengthscale)?;
                check_positive("preconditioner alpha", *alpha)
            }
            BaseKernel::Product(fs) => {
                if fs.is_empty() {
                    return Err(Error::InvalidArgument(
                        "product kernel needs at least one factor".into(),
                    ));
                }
                for f in fs {
                    if matches!(f, BaseKernel::Product(_)) {
                        return Err(Error::InvalidArgument(
                            "product kernel factors must be one-dimensional kernels".into(),
                        ));
                    }
                    f.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Input dimension fixed by the kernel, if any (only products fix it).
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            BaseKernel::Product(fs) => Some(fs.len()),
            _ => None,
        }
    }

    /// Whether third and fourth order mixed partials are available.
    pub fn has_second_partials(&self) -> bool {
        match self {
            BaseKernel::PreconditionedSe { .. } => false,
            BaseKernel::Product(fs) => fs.iter().all(|f| f.has_second_partials()),
            _ => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseKernel::Polynomial { .. } => "polynomial",
            BaseKernel::SquaredExponential { .. } => "squared-exponential",
            BaseKernel::PreconditionedSe { .. } => "preconditioned-se",
            BaseKernel::Product(_) => "product",
        }
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        if let Some(d) = self.fixed_dim() {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x.len(),
                });
            }
        }
        if x.is_empty() {
            return Err(Error::InvalidArgument("kernel inputs must be non-empty".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dims(x, y)?;
        Ok(self.eval_unchecked(x, y))
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            BaseKernel::Polynomial { c, degree } => (dot(x, y) + c).powi(*degree as i32),
            BaseKernel::SquaredExponential { lambda } => se_value(x, y, *lambda),
            BaseKernel::PreconditionedSe { lengthscale, alpha } => {
                let (k, _, _) = precond_parts(x, y, *lengthscale, *alpha);
                k
            }
            BaseKernel::Product(fs) => fs
                .iter()
                .enumerate()
                .map(|(j, f)| f.eval_unchecked(&x[j..=j], &y[j..=j]))
                .product(),
        }
    }

    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.first_order(x, y)?.grad_x)
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.first_order(x, y)?.grad_y)
    }

    pub fn div_xy(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.first_order(x, y)?.div_xy)
    }

    /// Value, both gradients and `∇_x·∇_y k` in one pass.
    pub fn first_order(&self, x: &[f64], y: &[f64]) -> Result<FirstOrderTerms> {
        self.check_dims(x, y)?;
        Ok(self.first_order_unchecked(x, y))
    }

    fn first_order_unchecked(&self, x: &[f64], y: &[f64]) -> FirstOrderTerms {
        let d = x.len();
        match self {
            BaseKernel::Polynomial { c, degree } => {
                let xy = dot(x, y);
                let b = xy + c;
                let p0 = falling_power(*degree, 0, b);
                let p1 = falling_power(*degree, 1, b);
                let p2 = falling_power(*degree, 2, b);
                FirstOrderTerms {
                    k: p0,
                    grad_x: y.iter().map(|v| p1 * v).collect(),
                    grad_y: x.iter().map(|v| p1 * v).collect(),
                    div_xy: p2 * xy + d as f64 * p1,
                }
            }
            BaseKernel::SquaredExponential { lambda } => {
                let l = *lambda;
                let k = se_value(x, y, l);
                let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let sq = dot(&u, &u);
                FirstOrderTerms {
                    k,
                    grad_x: u.iter().map(|ui| -ui / l * k).collect(),
                    grad_y: u.iter().map(|ui| ui / l * k).collect(),
                    div_xy: (d as f64 / l - sq / (l * l)) * k,
                }
            }
            BaseKernel::PreconditionedSe { lengthscale, alpha } => {
                let l2 = lengthscale * lengthscale;
                let a = *alpha;
                let (k, px, py) = precond_parts(x, y, *lengthscale, a);
                let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let grad_x = x
                    .iter()
                    .zip(&u)
                    .map(|(xi, ui)| (-2.0 * a * xi / px - ui / l2) * k)
                    .collect();
                let grad_y = y
                    .iter()
                    .zip(&u)
                    .map(|(yi, ui)| (-2.0 * a * yi / py + ui / l2) * k)
                    .collect();
                let div = k
                    * (4.0 * a * a * dot(x, y) / (px * py) + 2.0 * a * dot(&u, y) / (l2 * py)
                        - 2.0 * a * dot(&u, x) / (l2 * px)
                        + d as f64 / l2
                        - dot(&u, &u) / (l2 * l2));
                FirstOrderTerms {
                    k,
                    grad_x,
                    grad_y,
                    div_xy: div,
                }
            }
            BaseKernel::Product(fs) => {
                let parts: Vec<Partials1d> = fs
                    .iter()
                    .enumerate()
                    .map(|(j, f)| f.partials_1d(x[j], y[j], false))
                    .collect();
                let others = products_except_one(&parts);
                let k = parts.iter().map(|p| p.k).product();
                let grad_x = parts.iter().zip(&others).map(|(p, o)| p.x * o).collect();
                let grad_y = parts.iter().zip(&others).map(|(p, o)| p.y * o).collect();
                let div_xy = parts.iter().zip(&others).map(|(p, o)| p.xy * o).sum();
                FirstOrderTerms {
                    k,
                    grad_x,
                    grad_y,
                    div_xy,
                }
            }
        }
    }

    /// Third and fourth order mixed partials.
    pub fn second_partials(&self, x: &[f64], y: &[f64]) -> Result<SecondPartials> {
        self.check_dims(x, y)?;
        if !self.has_second_partials() {
            return Err(Error::Unsupported(format!(
                "{} kernel has no closed-form higher partials",
                self.name()
            )));
        }
        Ok(self.second_partials_unchecked(x, y))
    }

    fn second_partials_unchecked(&self, x: &[f64], y: &[f64]) -> SecondPartials {
        let d = x.len();
        let mut out = SecondPartials::zeros(d);
        match self {
            BaseKernel::Polynomial { c, degree } => {
                let b = dot(x, y) + c;
                let p: Vec<f64> = (0..=4).map(|n| falling_power(*degree, n, b)).collect();
                for s in 0..d {
                    for r in 0..d {
                        let i = s * d + r;
                        let dl = if s == r { 1.0 } else { 0.0 };
                        out.xy[i] = p[2] * x[r] * y[s] + p[1] * dl;
                        out.xxy[i] = p[3] * x[r] * y[s] * y[s] + 2.0 * p[2] * dl * y[s];
                        out.xyy[i] = p[3] * x[r] * x[r] * y[s] + 2.0 * p[2] * dl * x[r];
                        out.xxyy[i] = p[4] * x[r] * x[r] * y[s] * y[s]
                            + 4.0 * p[3] * dl * x[r] * y[s]
                            + 2.0 * p[2] * dl;
                    }
                }
            }
            BaseKernel::SquaredExponential { lambda } => {
                let l = *lambda;
                let l2 = l * l;
                let l3 = l2 * l;
                let k = se_value(x, y, l);
                let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                for s in 0..d {
                    for r in 0..d {
                        let i = s * d + r;
                        let dl = if s == r { 1.0 } else { 0.0 };
                        let (us, ur) = (u[s], u[r]);
                        out.xy[i] = (dl / l - us * ur / l2) * k;
                        out.xxy[i] = (-ur / l2 - 2.0 * dl * us / l2 + us * us * ur / l3) * k;
                        let cc = us / l2 + 2.0 * dl * ur / l2 - us * ur * ur / l3;
                        out.xyy[i] = cc * k;
                        let dcc = 1.0 / l2 + 2.0 * dl / l2 - ur * ur / l3 - 2.0 * dl * us * ur / l3;
                        out.xxyy[i] = (dcc - us / l * cc) * k;
                    }
                }
            }
            BaseKernel::PreconditionedSe { .. } => unreachable!("checked by caller"),
            BaseKernel::Product(fs) => {
                let parts: Vec<Partials1d> = fs
                    .iter()
                    .enumerate()
                    .map(|(j, f)| f.partials_1d(x[j], y[j], true))
                    .collect();
                let others = products_except_one(&parts);
                for s in 0..d {
                    for r in 0..d {
                        let i = s * d + r;
                        let (ps, pr) = (&parts[s], &parts[r]);
                        if s == r {
                            let o = others[s];
                            out.xy[i] = ps.xy * o;
                            out.xxy[i] = ps.xxy * o;
                            out.xyy[i] = ps.xyy * o;
                            out.xxyy[i] = ps.xxyy * o;
                        } else {
                            let o: f64 = parts
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != s && *j != r)
                                .map(|(_, p)| p.k)
                                .product();
                            out.xy[i] = ps.x * pr.y * o;
                            out.xxy[i] = ps.xx * pr.y * o;
                            out.xyy[i] = ps.x * pr.yy * o;
                            out.xxyy[i] = ps.xx * pr.yy * o;
                        }
                    }
                }
            }
        }
        out
    }

    /// Partials of a one-dimensional kernel. Higher partials are only filled
    /// when `higher` is set.
    fn partials_1d(&self, x: f64, y: f64, higher: bool) -> Partials1d {
        match self {
            BaseKernel::Polynomial { c, degree } => {
                let b = x * y + c;
                let p: Vec<f64> = (0..=4).map(|n| falling_power(*degree, n, b)).collect();
                Partials1d {
                    k: p[0],
                    x: p[1] * y,
                    y: p[1] * x,
                    xx: p[2] * y * y,
                    yy: p[2] * x * x,
                    xy: p[2] * x * y + p[1],
                    xxy: p[3] * x * y * y + 2.0 * p[2] * y,
                    xyy: p[3] * x * x * y + 2.0 * p[2] * x,
                    xxyy: p[4] * x * x * y * y + 4.0 * p[3] * x * y + 2.0 * p[2],
                }
            }
            BaseKernel::SquaredExponential { lambda } => {
                let l = *lambda;
                let u = x - y;
                let u2 = u * u;
                let k = (-u2 / (2.0 * l)).exp();
                let mut p = Partials1d {
                    k,
                    x: -u / l * k,
                    y: u / l * k,
                    xy: (1.0 / l - u2 / (l * l)) * k,
                    ..Default::default()
                };
                if higher {
                    let l2 = l * l;
                    let l3 = l2 * l;
                    p.xx = (u2 / l2 - 1.0 / l) * k;
                    p.yy = p.xx;
                    p.xxy = (-3.0 * u / l2 + u2 * u / l3) * k;
                    p.xyy = -p.xxy;
                    p.xxyy = (3.0 / l2 - 6.0 * u2 / l3 + u2 * u2 / (l3 * l)) * k;
                }
                p
            }
            BaseKernel::PreconditionedSe { .. } => {
                let t = self.first_order_unchecked(&[x], &[y]);
                Partials1d {
                    k: t.k,
                    x: t.grad_x[0],
                    y: t.grad_y[0],
                    xy: t.div_xy,
                    ..Default::default()
                }
            }
            BaseKernel::Product(_) => unreachable!("validated: product factors are 1-d"),
        }
    }

    /// Logarithms of the positive hyperparameters, in a fixed order.
    ///
    /// A polynomial offset takes part only when it is positive; the degree is
    /// never tuned.
    pub fn log_params(&self) -> Vec<f64> {
        match self {
            BaseKernel::Polynomial { c, .. } => {
                if *c > 0.0 {
                    vec![c.ln()]
                } else {
                    vec![]
                }
            }
            BaseKernel::SquaredExponential { lambda } => vec![lambda.ln()],
            BaseKernel::PreconditionedSe { lengthscale, alpha } => {
                vec![lengthscale.ln(), alpha.ln()]
            }
            BaseKernel::Product(fs) => fs.iter().flat_map(|f| f.log_params()).collect(),
        }
    }

    /// Inverse of [`log_params`](Self::log_params).
    pub fn with_log_params(&self, p: &[f64]) -> Result<Self> {
        let n = self.log_params().len();
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        let out = match self {
            BaseKernel::Polynomial { c, degree } => BaseKernel::Polynomial {
                c: if n == 1 { p[0].exp() } else { *c },
                degree: *degree,
            },
            BaseKernel::SquaredExponential { .. } => BaseKernel::SquaredExponential {
                lambda: p[0].exp(),
            },
            BaseKernel::PreconditionedSe { .. } => BaseKernel::PreconditionedSe {
                lengthscale: p[0].exp(),
                alpha: p[1].exp(),
            },
            BaseKernel::Product(fs) => {
                let mut at = 0;
                let mut out = Vec::with_capacity(fs.len());
                for f in fs {
                    let k = f.log_params().len();
                    out.push(f.with_log_params(&p[at..at + k])?);
                    at += k;
                }
                BaseKernel::Product(out)
            }
        };
        out.validate()?;
        Ok(out)
    }
}

fn se_value(x: &[f64], y: &[f64], lambda: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * lambda)).exp()
}

/// Kernel value and the two preconditioner factors `1 + α‖x‖²`, `1 + α‖y‖²`.
fn precond_parts(x: &[f64], y: &[f64], lengthscale: f64, alpha: f64) -> (f64, f64, f64) {
    let px = 1.0 + alpha * dot(x, x);
    let py = 1.0 + alpha * dot(y, y);
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let k = (-sq / (2.0 * lengthscale * lengthscale)).exp() / (px * py);
    (k, px, py)
}

/// `∏_{i≠j} k_i` for every `j`, by prefix and suffix products.
fn products_except_one(parts: &[Partials1d]) -> Vec<f64> {
    let d = parts.len();
    let mut out = vec![1.0; d];
    let mut acc = 1.0;
    for j in 0..d {
        out[j] = acc;
        acc *= parts[j].k;
    }
    acc = 1.0;
    for j in (0..d).rev() {
        out[j] *= acc;
        acc *= parts[j].k;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kinds(d: usize) -> Vec<BaseKernel> {
        vec![
            BaseKernel::polynomial(1.0, 1).unwrap(),
            BaseKernel::polynomial(0.5, 2).unwrap(),
            BaseKernel::polynomial(1.3, 3).unwrap(),
            BaseKernel::squared_exponential(1.7).unwrap(),
            BaseKernel::preconditioned_se(1.4, 0.1).unwrap(),
            BaseKernel::product_se(&(0..d).map(|j| 0.5 + j as f64).collect::<Vec<_>>()).unwrap(),
            BaseKernel::product(
                (0..d)
                    .map(|j| {
                        if j % 2 == 0 {
                            BaseKernel::PreconditionedSe {
                                lengthscale: 1.2,
                                alpha: 0.2,
                            }
                        } else {
                            BaseKernel::Polynomial { c: 1.0, degree: 2 }
                        }
                    })
                    .collect(),
            )
            .unwrap(),
        ]
    }

    fn rand_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn step(v: f64) -> f64 {
        1e-5 * v.abs().max(1.0)
    }

    /// Central difference of `f` in coordinate `j` of `x`.
    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], j: usize) -> f64 {
        let h = step(x[j]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, scale: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn spot_values() {
        let se = BaseKernel::squared_exponential(1.0).unwrap();
        assert_eq!(se.eval(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 1.0);
        assert_eq!(se.grad_x(&[0.3], &[0.3]).unwrap(), vec![0.0]);
        let g = se.grad_x(&[1.0], &[0.0]).unwrap()[0];
        assert!((g + (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(se.div_xy(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 3.0);

        let poly = BaseKernel::polynomial(1.0, 2).unwrap();
        assert_eq!(poly.eval(&[0.0], &[0.0]).unwrap(), 1.0);
        let lin = BaseKernel::polynomial(-0.7, 1).unwrap();
        assert_eq!(lin.grad_x(&[5.0, 1.0], &[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(lin.div_xy(&[5.0, 1.0, 0.0], &[2.0, 3.0, 4.0]).unwrap(), 3.0);

        let pre = BaseKernel::preconditioned_se(3.0, 0.1).unwrap();
        assert_eq!(pre.eval(&[0.0], &[0.0]).unwrap(), 1.0);

        let prod = BaseKernel::product_se(&[1.0, 1.0]).unwrap();
        assert_eq!(prod.div_xy(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), 2.0);
    }

    #[test]
    fn se_fourth_order_at_origin() {
        let se = BaseKernel::squared_exponential(1.0).unwrap();
        let sp = se.second_partials(&[0.0], &[0.0]).unwrap();
        assert!((sp.xxyy[0] - 3.0).abs() < 1e-14);
        assert_eq!(sp.xxy[0], 0.0);
        assert_eq!(sp.xyy[0], 0.0);
    }

    #[test]
    fn linear_polynomial_has_no_higher_terms() {
        let lin = BaseKernel::polynomial(2.0, 1).unwrap();
        let sp = lin.second_partials(&[0.3, 1.0], &[-2.0, 0.5]).unwrap();
        assert!(sp.xxy.iter().chain(&sp.xyy).chain(&sp.xxyy).all(|v| *v == 0.0));
    }

    #[test]
    fn preconditioned_rejects_higher_partials() {
        let pre = BaseKernel::preconditioned_se(1.0, 0.5).unwrap();
        assert!(matches!(
            pre.second_partials(&[0.0], &[0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(BaseKernel::squared_exponential(0.0).is_err());
        assert!(BaseKernel::squared_exponential(-1.0).is_err());
        assert!(BaseKernel::preconditioned_se(1.0, 0.0).is_err());
        assert!(BaseKernel::product(vec![]).is_err());
        assert!(BaseKernel::product(vec![BaseKernel::product_se(&[1.0]).unwrap()]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let se = BaseKernel::squared_exponential(1.0).unwrap();
        assert!(matches!(
            se.eval(&[0.0, 1.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let prod = BaseKernel::product_se(&[1.0, 2.0]).unwrap();
        assert!(prod.eval(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn first_derivatives_match_finite_differences() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in kinds(d) {
            for _ in 0..200 {
                let x = rand_point(&mut rng, d);
                let y = rand_point(&mut rng, d);
                let t = k.first_order(&x, &y).unwrap();
                let scale = t.k.abs().max(1e-3);
                for j in 0..d {
                    let gx = fd(|xx| k.eval(xx, &y).unwrap(), &x, j);
                    let gy = fd(|yy| k.eval(&x, yy).unwrap(), &y, j);
                    assert!(close(gx, t.grad_x[j], scale), "{k:?} grad_x {gx} vs {}", t.grad_x[j]);
                    assert!(close(gy, t.grad_y[j], scale), "{k:?} grad_y {gy} vs {}", t.grad_y[j]);
                }
                let div: f64 = (0..d)
                    .map(|j| fd(|yy| k.grad_x(&x, yy).unwrap()[j], &y, j))
                    .sum();
                assert!(close(div, t.div_xy, scale), "{k:?} div {div} vs {}", t.div_xy);
            }
        }
    }

    #[test]
    fn higher_partials_match_finite_differences() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in kinds(d).into_iter().filter(|k| k.has_second_partials()) {
            for _ in 0..200 {
                let x = rand_point(&mut rng, d);
                let y = rand_point(&mut rng, d);
                let sp = k.second_partials(&x, &y).unwrap();
                let scale = k.eval(&x, &y).unwrap().abs().max(1e-3);
                for s in 0..d {
                    for r in 0..d {
                        let i = s * d + r;
                        // ∂x_s of ∂y_r k
                        let xy = fd(|xx| k.grad_y(xx, &y).unwrap()[r], &x, s);
                        // ∂x_s of ∂x_s∂y_r k
                        let xxy = fd(|xx| k.second_partials(xx, &y).unwrap().xy[i], &x, s);
                        // ∂y_r of ∂x_s∂y_r k
                        let xyy = fd(|yy| k.second_partials(&x, yy).unwrap().xy[i], &y, r);
                        // ∂y_r of ∂x_s²∂y_r k
                        let xxyy = fd(|yy| k.second_partials(&x, yy).unwrap().xxy[i], &y, r);
                        assert!(close(xy, sp.xy[i], scale), "{k:?} xy");
                        assert!(close(xxy, sp.xxy[i], scale), "{k:?} xxy {xxy} vs {}", sp.xxy[i]);
                        assert!(close(xyy, sp.xyy[i], scale), "{k:?} xyy");
                        assert!(close(xxyy, sp.xxyy[i], scale), "{k:?} xxyy {xxyy} vs {}", sp.xxyy[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn product_matches_brute_force_product() {
        let d = 4;
        let lambdas = [0.4, 1.0, 2.5, 0.9];
        let prod = BaseKernel::product_se(&lambdas).unwrap();
        let factors: Vec<BaseKernel> = lambdas
            .iter()
            .map(|&l| BaseKernel::squared_exponential(l).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = rand_point(&mut rng, d);
            let y = rand_point(&mut rng, d);
            let vals: Vec<FirstOrderTerms> = (0..d)
                .map(|j| factors[j].first_order(&x[j..=j], &y[j..=j]).unwrap())
                .collect();
            let k: f64 = vals.iter().map(|v| v.k).product();
            let t = prod.first_order(&x, &y).unwrap();
            assert!((t.k - k).abs() < 1e-10);
            let mut div = 0.0;
            for j in 0..d {
                let rest: f64 = (0..d).filter(|&i| i != j).map(|i| vals[i].k).product();
                assert!((t.grad_x[j] - vals[j].grad_x[0] * rest).abs() < 1e-10);
                assert!((t.grad_y[j] - vals[j].grad_y[0] * rest).abs() < 1e-10);
                div += vals[j].div_xy * rest;
            }
            assert!((t.div_xy - div).abs() < 1e-10);
        }
    }

    #[test]
    fn product_of_one_factor_is_that_kernel() {
        let se = BaseKernel::squared_exponential(0.8).unwrap();
        let prod = BaseKernel::product_se(&[0.8]).unwrap();
        let (x, y) = ([0.3], [-0.9]);
        assert!((se.eval(&x, &y).unwrap() - prod.eval(&x, &y).unwrap()).abs() < 1e-15);
        let a = se.second_partials(&x, &y).unwrap();
        let b = prod.second_partials(&x, &y).unwrap();
        for i in 0..4 {
            assert!((a.at(0, 0)[i] - b.at(0, 0)[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn psd_gram_on_random_points() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in kinds(d) {
            let pts: Vec<Vec<f64>> = (0..20).map(|_| rand_point(&mut rng, d)).collect();
            let n = pts.len();
            let g = nalgebra::DMatrix::from_fn(n, n, |i, j| k.eval(&pts[i], &pts[j]).unwrap());
            let eig = g.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            assert!(min >= -1e-8 * g.trace(), "{k:?}: min eig {min}");
        }
    }

    #[test]
    fn log_params_round_trip() {
        for k in kinds(3) {
            let p = k.log_params();
            let back = k.with_log_params(&p).unwrap();
            for (a, b) in back.log_params().iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let se = BaseKernel::squared_exponential(2.0).unwrap();
        assert!(se.with_log_params(&[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetry_of_values_and_gradients(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            y in proptest::collection::vec(-2.0f64..2.0, 3),
            which in 0usize..7,
        ) {
            let k = &kinds(3)[which];
            let kxy = k.eval(&x, &y).unwrap();
            let kyx = k.eval(&y, &x).unwrap();
            prop_assert!((kxy - kyx).abs() <= 1e-12 * kxy.abs().max(1.0));
            let gx = k.grad_x(&x, &y).unwrap();
            let gy = k.grad_y(&y, &x).unwrap();
            for (a, b) in gx.iter().zip(&gy) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
