//! Constrained vector-optimization primitives.
//!
//! A problem is `max f(x)` over `x ∈ ℝⁿ` with `f: ℝⁿ → ℝᵐ`, subject to the
//! linear system `Aᵀx + a ≤ 0`, `Bᵀx + b = 0`. Constraints are stored one
//! per *column* so that `A` is `n × p` and gaps read `Aᵀx + a`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance used by [`is_feasible`] callers that have no better idea.
pub const DEFAULT_FEAS_TOL: f64 = 1e-8;

/// `{x : Aᵀx + a ≤ 0, Bᵀx + b = 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeasibleRegion {
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_offset: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_offset: DVector<f64>,
}

impl LinearFeasibleRegion {
    pub fn new(
        ineq_matrix: DMatrix<f64>,
        ineq_offset: DVector<f64>,
        eq_matrix: DMatrix<f64>,
        eq_offset: DVector<f64>,
    ) -> Result<Self> {
        let n = ineq_matrix.nrows();
        if eq_matrix.nrows() != n {
            return Err(Error::Dimension(format!("A has {n} rows but B has {}", eq_matrix.nrows())));
        }
        if ineq_matrix.ncols() != ineq_offset.len() {
            return Err(Error::Dimension(format!(
                "A has {} columns but a has {} entries",
                ineq_matrix.ncols(),
                ineq_offset.len()
            )));
        }
        if eq_matrix.ncols() != eq_offset.len() {
            return Err(Error::Dimension(format!(
                "B has {} columns but b has {} entries",
                eq_matrix.ncols(),
                eq_offset.len()
            )));
        }
        let finite = ineq_matrix.iter().chain(ineq_offset.iter()).all(|v| v.is_finite())
            && eq_matrix.iter().chain(eq_offset.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("constraint data must be finite".into()));
        }
        Ok(Self { ineq_matrix, ineq_offset, eq_matrix, eq_offset })
    }

    /// No constraints at all in `ℝⁿ`.
    pub fn unconstrained(n: usize) -> Self {
        Self {
            ineq_matrix: DMatrix::zeros(n, 0),
            ineq_offset: DVector::zeros(0),
            eq_matrix: DMatrix::zeros(n, 0),
            eq_offset: DVector::zeros(0),
        }
    }

    /// The same region with `x_k ≥ lo` appended as the last `n` inequality
    /// columns.
    pub fn with_lower_bounds(&self, lo: f64) -> Self {
        let n = self.dim();
        let p = self.n_ineq();
        let mut ineq_matrix = self.ineq_matrix.clone().resize_horizontally(p + n, 0.0);
        for k in 0..n {
            ineq_matrix[(k, p + k)] = -1.0;
        }
        let mut ineq_offset = self.ineq_offset.clone().resize_vertically(p + n, lo);
        ineq_offset.rows_mut(p, n).fill(lo);
        Self { ineq_matrix, ineq_offset, eq_matrix: self.eq_matrix.clone(), eq_offset: self.eq_offset.clone() }
    }

    pub fn dim(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_offset.len()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_offset.len()
    }
}

/// `δᵃ = Aᵀx + a` and `δᵇ = Bᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGaps {
    pub ineq_gap: DVector<f64>,
    pub eq_gap: DVector<f64>,
}

impl ConstraintGaps {
    /// Largest inequality violation, zero when all are satisfied.
    pub fn max_ineq_violation(&self) -> f64 {
        self.ineq_gap.iter().fold(0.0_f64, |m, &d| m.max(d))
    }

    pub fn max_eq_violation(&self) -> f64 {
        self.eq_gap.iter().fold(0.0_f64, |m, &d| m.max(d.abs()))
    }

    pub fn max_violation(&self) -> f64 {
        self.max_ineq_violation().max(self.max_eq_violation())
    }
}

/// A vector objective: values and the `n × m` Jacobian (column `j` is `∇f_j`).
pub trait ObjectiveBundle {
    fn n_objectives(&self) -> usize;
    fn values(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Adapter turning a pair of closures into an [`ObjectiveBundle`].
pub struct FnBundle<V, G> {
    pub m: usize,
    pub values: V,
    pub jacobian: G,
}

impl<V, G> ObjectiveBundle for FnBundle<V, G>
where
    V: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn n_objectives(&self) -> usize {
        self.m
    }
    fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.values)(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }
}

fn check_dim(region: &LinearFeasibleRegion, x: &DVector<f64>) -> Result<()> {
    if x.len() != region.dim() {
        return Err(Error::Dimension(format!("x has {} entries, region lives in dimension {}", x.len(), region.dim())));
    }
    Ok(())
}

pub fn constraint_gaps(region: &LinearFeasibleRegion, x: &DVector<f64>) -> Result<ConstraintGaps> {
    check_dim(region, x)?;
    Ok(ConstraintGaps {
        ineq_gap: region.ineq_matrix.tr_mul(x) + &region.ineq_offset,
        eq_gap: region.eq_matrix.tr_mul(x) + &region.eq_offset,
    })
}

pub fn is_feasible(region: &LinearFeasibleRegion, x: &DVector<f64>, tol: f64) -> Result<bool> {
    if !(tol >= 0.0) {
        return Err(Error::Usage(format!("tolerance must be non-negative, got {tol}")));
    }
    let gaps = constraint_gaps(region, x)?;
    Ok(gaps.max_ineq_violation() <= tol && gaps.max_eq_violation() <= tol)
}

/// Outcome of comparing two objective vectors under maximization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dominance {
    DominatesStrictly,
    WeaklyDominates,
    DominatedBy,
    WeaklyDominatedBy,
    Incomparable,
    Equal,
}

/// Pareto comparison of `fx` against `fy` (larger is better).
///
/// `Equal` takes precedence over the weak variants, so `fx ≥ fy` reports
/// `DominatesStrictly` or `Equal`; NaN anywhere makes the pair incomparable.
pub fn dominance(fx: &[f64], fy: &[f64]) -> Result<Dominance> {
    if fx.len() != fy.len() {
        return Err(Error::Dimension(format!("{} vs {} objectives", fx.len(), fy.len())));
    }
    let (mut ge, mut le, mut gt, mut lt) = (true, true, false, false);
    for (&a, &b) in fx.iter().zip(fy) {
        if a < b {
            ge = false;
            lt = true;
        }
        if a > b {
            le = false;
            gt = true;
        }
        if a.is_nan() || b.is_nan() {
            return Ok(Dominance::Incomparable);
        }
    }
    Ok(match (ge, le) {
        (true, true) => Dominance::Equal,
        (true, false) if gt => Dominance::DominatesStrictly,
        (true, false) => Dominance::WeaklyDominates,
        (false, true) if lt => Dominance::DominatedBy,
        (false, true) => Dominance::WeaklyDominatedBy,
        (false, false) => Dominance::Incomparable,
    })
}

/// `fx` beats `fy` by more than `slack` in every component. Points that are
/// mutually non-dominated up to numerical noise of size `slack` never
/// trigger it.
pub fn dominates_with_slack(fx: &[f64], fy: &[f64], slack: f64) -> bool {
    !fx.is_empty() && fx.iter().zip(fy).all(|(a, b)| *a > *b + slack)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FritzJohnResidual {
    pub stationarity: f64,
    pub complementarity: f64,
    pub sign_violation: f64,
}

/// Residuals of `∇f·ξ − A·λ − B·μ = 0`, `λᵀ(Aᵀx + a) = 0`, `ξ, λ ≥ 0`.
pub fn fritz_john_residual(
    region: &LinearFeasibleRegion,
    jacobian: &DMatrix<f64>,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<FritzJohnResidual> {
    check_dim(region, x)?;
    if jacobian.nrows() != region.dim() || jacobian.ncols() != xi.len() {
        return Err(Error::Dimension(format!(
            "jacobian is {}x{}, expected {}x{}",
            jacobian.nrows(),
            jacobian.ncols(),
            region.dim(),
            xi.len()
        )));
    }
    if lambda.len() != region.n_ineq() || mu.len() != region.n_eq() {
        return Err(Error::Dimension(format!(
            "multipliers ({}, {}) vs constraints ({}, {})",
            lambda.len(),
            mu.len(),
            region.n_ineq(),
            region.n_eq()
        )));
    }
    let r = jacobian * xi - &region.ineq_matrix * lambda - &region.eq_matrix * mu;
    let gaps = constraint_gaps(region, x)?;
    let min_xi = xi.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_lambda = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(FritzJohnResidual {
        stationarity: r.amax(),
        complementarity: lambda.dot(&gaps.ineq_gap).abs(),
        sign_violation: 0.0_f64.max(-min_xi).max(-min_lambda),
    })
}

/// Sampled falsifier for quasiconcavity along the chord `[y, x]`.
pub fn quasiconcavity_probe<F>(f: F, x: &DVector<f64>, y: &DVector<f64>, samples: usize) -> Result<bool>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if samples < 2 {
        return Err(Error::Usage(format!("need at least 2 samples, got {samples}")));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {}", x.len(), y.len())));
    }
    let floor = f(x).min(f(y)) - 1e-12;
    Ok((0..samples).all(|i| {
        let t = i as f64 / (samples - 1) as f64;
        f(&(x * t + y * (1.0 - t))) >= floor
    }))
}
