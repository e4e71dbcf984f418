//! Jain's fairness index `J(x) = (1ᵀx)² / (n·xᵀx)` and its derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn nonzero(x: &DVector<f64>) -> Result<f64> {
    let q = x.norm_squared();
    if q == 0.0 || !q.is_finite() {
        return Err(Error::Domain("Jain's index is undefined at the origin".into()));
    }
    Ok(q)
}

/// `(1ᵀx)² / (n·xᵀx)`; `n` is usually `x.len()`.
pub fn jains_index(x: &DVector<f64>, n: usize) -> Result<f64> {
    let q = nonzero(x)?;
    if n == 0 {
        return Err(Error::Usage("n must be at least 1".into()));
    }
    Ok(x.sum().powi(2) / (n as f64 * q))
}

/// `∇J = 2√J (1/(‖1‖‖x‖) − √J·x/‖x‖²)`.
pub fn jains_gradient(x: &DVector<f64>) -> Result<DVector<f64>> {
    let q = nonzero(x)?;
    let n = x.len() as f64;
    let j = x.sum().powi(2) / (n * q);
    let sj = j.sqrt();
    let nx = q.sqrt();
    // √J carries the sign of 1ᵀx through the first term.
    let sj_signed = if x.sum() < 0.0 { -sj } else { sj };
    Ok(x.map(|xi| 2.0 * sj_signed * (1.0 / (n.sqrt() * nx)) - 2.0 * j * xi / q))
}

/// Full Hessian `∇²J(x)`.
pub fn jains_hessian(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let q = nonzero(x)?;
    let n = x.len();
    let nf = n as f64;
    let s = x.sum();
    Ok(DMatrix::from_fn(n, n, |i, k| {
        let delta = if i == k { 1.0 } else { 0.0 };
        2.0 / (nf * q) - 4.0 * s * (x[i] + x[k]) / (nf * q * q) - 2.0 * s * s * delta / (nf * q * q)
            + 8.0 * s * s * x[i] * x[k] / (nf * q * q * q)
    }))
}

/// `yᵀ∇²J(x)y`.
///
/// When `y ⟂ ∇J(x)` (to 1e-8 relative) this collapses to
/// `−2J(‖x‖²‖y‖² − (xᵀy)²)/‖x‖⁴`, which is strictly negative for independent
/// `x`, `y` by Cauchy–Schwarz; otherwise the full Hessian is contracted.
pub fn jains_hessian_quadform(x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {}", x.len(), y.len())));
    }
    let g = jains_gradient(x)?;
    if y.dot(&g).abs() <= 1e-8 * (g.norm() * y.norm()).max(f64::MIN_POSITIVE) {
        Ok(jains_quadform_tangent(x, y)?)
    } else {
        let h = jains_hessian(x)?;
        Ok(y.dot(&(h * y)))
    }
}

/// Closed form of `yᵀ∇²J(x)y` valid only on the tangent space `yᵀ∇J(x) = 0`.
pub fn jains_quadform_tangent(x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let q = nonzero(x)?;
    let j = jains_index(x, x.len())?;
    let xy = x.dot(y);
    Ok(-2.0 * j * (q * y.norm_squared() - xy * xy) / (q * q))
}

/// The `x_k = p_k / (c_k·G_k)` argument of the fairness objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAllocation {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub c: DVector<f64>,
    pub counts: Vec<usize>,
}

impl NormalizedAllocation {
    pub fn new(p: &DVector<f64>, c: &DVector<f64>, counts: &[usize]) -> Result<Self> {
        if p.len() != c.len() || p.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "p, c, counts have lengths {}, {}, {}",
                p.len(),
                c.len(),
                counts.len()
            )));
        }
        if c.iter().any(|&ck| !(ck > 0.0)) {
            return Err(Error::Domain("unit costs must be positive".into()));
        }
        if counts.contains(&0) {
            return Err(Error::Domain("every aggregator needs at least one agent".into()));
        }
        let x = DVector::from_fn(p.len(), |k, _| p[k] / (c[k] * counts[k] as f64));
        if x.iter().all(|&v| v == 0.0) {
            return Err(Error::Domain("allocation is zero".into()));
        }
        Ok(Self { x, p: p.clone(), c: c.clone(), counts: counts.to_vec() })
    }
}

/// `ℛ(p) = J(x(p))` and `∂ℛ/∂p_k = (∂J/∂x_k)/(c_k G_k)`, with `c` held fixed.
pub fn fairness_objective(p: &DVector<f64>, c: &DVector<f64>, counts: &[usize]) -> Result<(f64, DVector<f64>)> {
    let na = NormalizedAllocation::new(p, c, counts)?;
    let value = jains_index(&na.x, na.x.len())?;
    let gx = jains_gradient(&na.x)?;
    let grad = DVector::from_fn(p.len(), |k, _| gx[k] / (c[k] * counts[k] as f64));
    Ok((value, grad))
}

/// `x` majorizes `y`: equal totals and every smallest-`d` prefix sum of `x`
/// is at least that of `y`.
pub fn majorizes(x: &[f64], y: &[f64], tol: f64) -> Result<bool> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {}", x.len(), y.len())));
    }
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    if (sx - sy).abs() > tol {
        return Ok(false);
    }
    let (xs, ys) = (smallest_first(x), smallest_first(y));
    let (mut px, mut py) = (0.0, 0.0);
    for (a, b) in xs.iter().zip(&ys) {
        px += a;
        py += b;
        if px < py - tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The `d` smallest entries of `x` in ascending order.
pub fn smallest_prefix(x: &[f64], d: usize) -> Vec<f64> {
    let mut v = smallest_first(x);
    v.truncate(d);
    v
}

fn smallest_first(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}
