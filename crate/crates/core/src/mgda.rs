//! Multi-gradient ascent under linear constraints.
//!
//! The building blocks follow the textbook construction: the min-norm element
//! `ω′ = ∇f·ξ` of the convex hull of the objective gradients, the polyhedron
//! `F_ω` of directions that do not move a point further from the feasible set,
//! and the largest scaling `ν ∈ [0, ν_max]` with `ν·ω′ ∈ F_ω`.
//! [`alma_direction`] composes exactly these.
//!
//! The iteration driver [`run_problem`] supports two update rules:
//!
//! * [`DirectionRule::Literal`] — the plain augmented-Lagrangian scheme: take
//!   `ω`, ascend the duals along the gaps, and move `x` by
//!   `η^p·(ω − A·λ − B·μ)`.
//! * [`DirectionRule::Projected`] (default) — an active-set variant: gradients
//!   are projected onto the face spanned by the active constraints, weighted
//!   after normalisation so that objectives of very different magnitude both
//!   count, stepped along with a ratio test, and the result is restored onto
//!   the linearised feasible set by dual coordinate ascent. The duals reported
//!   are the least-squares multipliers of the active face, i.e. a Fritz-John
//!   certificate for the terminal point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecopt::{constraint_gaps, ConstraintGaps, LinearFeasibleRegion, ObjectiveBundle};

/// `ξ` on the unit simplex minimising `‖∇f·ξ‖`, and `ω′ = ∇f·ξ`.
///
/// Two objectives use the closed-form segment minimiser; more use Frank-Wolfe
/// with away steps. Ties (collinear or identical gradients) resolve to the
/// midpoint.
pub fn min_norm_weights(jacobian: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = jacobian.ncols();
    if m == 0 {
        return Err(Error::Dimension("jacobian has no columns".into()));
    }
    if jacobian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("jacobian has non-finite entries".into()));
    }
    let xi = match m {
        1 => DVector::from_element(1, 1.0),
        2 => {
            let (g1, g2) = (jacobian.column(0), jacobian.column(1));
            let d = g1 - g2;
            let dd = d.norm_squared();
            let scale = g1.norm_squared().max(g2.norm_squared());
            let t = if dd <= 1e-28 * scale || dd == 0.0 { 0.5 } else { ((g2 - g1).dot(&g2) / dd).clamp(0.0, 1.0) };
            DVector::from_vec(vec![t, 1.0 - t])
        }
        _ => frank_wolfe(jacobian),
    };
    let w = jacobian * &xi;
    Ok((xi, w))
}

fn frank_wolfe(jacobian: &DMatrix<f64>) -> DVector<f64> {
    let m = jacobian.ncols();
    let gram = jacobian.tr_mul(jacobian);
    let mut xi = DVector::from_element(m, 1.0 / m as f64);
    let mut q = xi.dot(&(&gram * &xi));
    let cap = (10 * m * m).max(100);
    for _ in 0..cap {
        let mx = &gram * &xi;
        let s = mx.imin();
        let v = (0..m).filter(|&i| xi[i] > 0.0).max_by(|&a, &b| mx[a].total_cmp(&mx[b])).unwrap_or(s);
        let fw_gap = q - mx[s];
        let away_gap = mx[v] - q;
        let (d, gmax) = if fw_gap >= away_gap {
            let mut d = -xi.clone();
            d[s] += 1.0;
            (d, 1.0)
        } else {
            let mut d = xi.clone();
            d[v] -= 1.0;
            (d, xi[v] / (1.0 - xi[v]).max(f64::MIN_POSITIVE))
        };
        let dmd = d.dot(&(&gram * &d));
        if fw_gap.max(away_gap) <= 1e-15 * q.abs().max(1e-300) || dmd <= 0.0 {
            break;
        }
        let gamma = (-mx.dot(&d) / dmd).clamp(0.0, gmax);
        xi += gamma * d;
        xi.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = xi.sum();
        xi /= s;
        let q_new = xi.dot(&(&gram * &xi));
        let done = q.max(0.0).sqrt() - q_new.max(0.0).sqrt() <= 1e-10;
        q = q_new;
        if done {
            break;
        }
    }
    xi
}

/// Directions that do not increase any constraint violation:
/// `Aᵀω ≤ −[δᵃ]₋`, `−[δᵇ]₊ ≤ Bᵀω ≤ −[δᵇ]₋`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaRegion {
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_lower: DVector<f64>,
    pub eq_upper: DVector<f64>,
}

impl OmegaRegion {
    pub fn contains(&self, w: &DVector<f64>, tol: f64) -> bool {
        let s = self.ineq_matrix.tr_mul(w);
        let e = self.eq_matrix.tr_mul(w);
        s.iter().zip(self.ineq_rhs.iter()).all(|(s, r)| *s <= r + tol)
            && e.iter().enumerate().all(|(j, e)| *e >= self.eq_lower[j] - tol && *e <= self.eq_upper[j] + tol)
    }
}

pub fn omega_region(region: &LinearFeasibleRegion, gaps: &ConstraintGaps) -> Result<OmegaRegion> {
    if gaps.ineq_gap.len() != region.n_ineq() || gaps.eq_gap.len() != region.n_eq() {
        return Err(Error::Dimension("gaps do not match the region".into()));
    }
    Ok(OmegaRegion {
        ineq_matrix: region.ineq_matrix.clone(),
        ineq_rhs: gaps.ineq_gap.map(|d| -d.min(0.0)),
        eq_matrix: region.eq_matrix.clone(),
        eq_lower: gaps.eq_gap.map(|d| -d.max(0.0)),
        eq_upper: gaps.eq_gap.map(|d| -d.min(0.0)),
    })
}

/// Largest `ν ∈ [0, ν_max]` with `ν·ω′ ∈ F_ω`, by a per-row ratio test.
pub fn max_scaling(w: &DVector<f64>, omega: &OmegaRegion, nu_max: f64) -> Result<f64> {
    if !(nu_max > 0.0) {
        return Err(Error::Usage(format!("nu_max must be positive, got {nu_max}")));
    }
    if w.len() != omega.ineq_matrix.nrows() {
        return Err(Error::Dimension(format!(
            "direction has {} entries, region lives in dimension {}",
            w.len(),
            omega.ineq_matrix.nrows()
        )));
    }
    let mut nu = nu_max;
    for (s, r) in omega.ineq_matrix.tr_mul(w).iter().zip(omega.ineq_rhs.iter()) {
        if *s > 0.0 {
            nu = nu.min(r / s);
        }
    }
    for (j, s) in omega.eq_matrix.tr_mul(w).iter().enumerate() {
        if *s > 0.0 {
            nu = nu.min(omega.eq_upper[j] / s);
        } else if *s < 0.0 {
            nu = nu.min(omega.eq_lower[j] / s);
        }
    }
    Ok(nu.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResult {
    pub xi: DVector<f64>,
    pub raw_direction: DVector<f64>,
    pub nu: f64,
    pub direction: DVector<f64>,
    pub min_norm: f64,
}

/// The bilevel direction problem: min-norm weights, then the largest feasible
/// scaling.
pub fn alma_direction(
    bundle: &dyn ObjectiveBundle,
    region: &LinearFeasibleRegion,
    x: &DVector<f64>,
    nu_max: f64,
) -> Result<DirectionResult> {
    let jac = bundle.jacobian(x);
    direction_for_jacobian(&jac, region, x, nu_max)
}

/// [`alma_direction`] for an already evaluated jacobian.
pub fn direction_for_jacobian(
    jacobian: &DMatrix<f64>,
    region: &LinearFeasibleRegion,
    x: &DVector<f64>,
    nu_max: f64,
) -> Result<DirectionResult> {
    check_jacobian(jacobian, region)?;
    let (xi, w) = min_norm_weights(jacobian)?;
    let gaps = constraint_gaps(region, x)?;
    let omega = omega_region(region, &gaps)?;
    let nu = max_scaling(&w, &omega, nu_max)?;
    let min_norm = w.norm();
    Ok(DirectionResult { direction: &w * nu, raw_direction: w, xi, nu, min_norm })
}

fn check_jacobian(jacobian: &DMatrix<f64>, region: &LinearFeasibleRegion) -> Result<()> {
    if jacobian.nrows() != region.dim() {
        return Err(Error::Dimension(format!(
            "jacobian has {} rows, region lives in dimension {}",
            jacobian.nrows(),
            region.dim()
        )));
    }
    Ok(())
}

/// Knobs of the active-set direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveSetOptions {
    /// Row `i` is active when `δᵃ_i ≥ −active_tol·‖A_i‖`.
    pub active_tol: f64,
    /// Relative singular-value cutoff when building the face projector.
    pub rank_tol: f64,
}

impl Default for ActiveSetOptions {
    fn default() -> Self {
        Self { active_tol: 1e-6, rank_tol: 1e-8 }
    }
}

/// Output of [`projected_direction`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedDirection {
    /// `xi` are the weights on the unprojected gradients, `raw_direction` the
    /// projected combination `P·∇f·ξ`, `direction` the scaled step direction.
    pub result: DirectionResult,
    pub active: Vec<usize>,
    /// Least-squares multipliers of the active face, clipped at zero.
    pub ineq_multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// Cosine between the first two projected gradients.
    pub cosine: Option<f64>,
}

fn face_projector(normals: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let n = normals.nrows();
    let mut p = DMatrix::identity(n, n);
    if normals.ncols() == 0 {
        return p;
    }
    let mut nn = normals.clone();
    for mut col in nn.column_iter_mut() {
        let s = col.norm();
        if s > 0.0 {
            col /= s;
        }
    }
    let svd = nn.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > rank_tol * smax {
            let ui = u.column(i);
            p -= ui * ui.transpose();
        }
    }
    p
}

fn face_normals(region: &LinearFeasibleRegion, active: &[usize]) -> DMatrix<f64> {
    let n = region.dim();
    let q = region.n_eq();
    let mut nm = DMatrix::zeros(n, active.len() + q);
    for (j, &i) in active.iter().enumerate() {
        nm.set_column(j, &region.ineq_matrix.column(i));
    }
    for j in 0..q {
        nm.set_column(active.len() + j, &region.eq_matrix.column(j));
    }
    nm
}

struct FaceStep {
    xi: DVector<f64>,
    step: DVector<f64>,
    combined: DVector<f64>,
    cosine: Option<f64>,
}

fn face_step(jac: &DMatrix<f64>, proj: &DMatrix<f64>, pinned: Option<&DVector<f64>>) -> Result<FaceStep> {
    let pg = proj * jac;
    let m = jac.ncols();
    let norms: Vec<f64> = pg.column_iter().map(|c| c.norm()).collect();
    let cosine =
        (m >= 2 && norms[0] > 0.0 && norms[1] > 0.0).then(|| pg.column(0).dot(&pg.column(1)) / (norms[0] * norms[1]));
    if let Some(xi) = pinned {
        let step = &pg * xi;
        return Ok(FaceStep { xi: xi.clone(), combined: step.clone(), step, cosine });
    }
    if let Some(j) = norms.iter().position(|&v| v == 0.0) {
        // One objective is already stationary on this face.
        let mut xi = DVector::zeros(m);
        xi[j] = 1.0;
        return Ok(FaceStep { xi, step: DVector::zeros(jac.nrows()), combined: DVector::zeros(jac.nrows()), cosine });
    }
    let mut unit = pg.clone();
    for (j, mut col) in unit.column_iter_mut().enumerate() {
        col /= norms[j];
    }
    let (t, w) = min_norm_weights(&unit)?;
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let mut xi = DVector::from_fn(m, |j, _| t[j] / norms[j]);
    let s = xi.sum();
    xi /= s;
    Ok(FaceStep { combined: &pg * &xi, step: w * scale, xi, cosine })
}

/// Active-set projected multi-gradient direction (see the module docs).
///
/// With `pinned` weights the min-norm problem is skipped and the projected
/// combination `P·∇f·ξ` is used as is.
pub fn projected_direction(
    jacobian: &DMatrix<f64>,
    region: &LinearFeasibleRegion,
    x: &DVector<f64>,
    nu_max: f64,
    pinned: Option<&DVector<f64>>,
    opts: &ActiveSetOptions,
) -> Result<ProjectedDirection> {
    check_jacobian(jacobian, region)?;
    if let Some(xi) = pinned {
        if xi.len() != jacobian.ncols() {
            return Err(Error::Dimension("pinned weights do not match the objectives".into()));
        }
    }
    let gaps = constraint_gaps(region, x)?;
    let row_norm: Vec<f64> = region.ineq_matrix.column_iter().map(|c| c.norm()).collect();
    let mut active: Vec<usize> = (0..region.n_ineq())
        .filter(|&i| row_norm[i] > 0.0 && gaps.ineq_gap[i] >= -opts.active_tol * row_norm[i])
        .collect();

    let (face, theta) = loop {
        let normals = face_normals(region, &active);
        let face = face_step(jacobian, &face_projector(&normals, opts.rank_tol), pinned)?;
        let target = jacobian * &face.xi;
        let theta = if normals.ncols() == 0 {
            DVector::zeros(0)
        } else {
            normals.clone().svd(true, true).solve(&target, 1e-12).map_err(|e| Error::Model(e.to_string()))?
        };
        let Some((j, &tmin)) = theta.rows(0, active.len()).iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
            break (face, theta);
        };
        if tmin >= 0.0 {
            break (face, theta);
        }
        // Release the most negative multiplier if the resulting direction
        // really leaves that constraint.
        let mut cand = active.clone();
        let row = cand.remove(j);
        let alt = face_step(jacobian, &face_projector(&face_normals(region, &cand), opts.rank_tol), pinned)?;
        let a = region.ineq_matrix.column(row);
        if a.dot(&alt.step) <= 1e-12 * a.norm() * alt.step.norm() {
            active = cand;
        } else {
            break (face, theta);
        }
    };

    let mut nu = nu_max;
    let s = region.ineq_matrix.tr_mul(&face.step);
    for i in 0..region.n_ineq() {
        if s[i] > 0.0 && active.binary_search(&i).is_err() {
            nu = nu.min(-gaps.ineq_gap[i].min(0.0) / s[i]);
        }
    }
    let nu = nu.max(0.0);
    let mut lam = DVector::zeros(region.n_ineq());
    for (j, &i) in active.iter().enumerate() {
        lam[i] = theta[j].max(0.0);
    }
    let mu = DVector::from_fn(region.n_eq(), |j, _| theta[active.len() + j]);
    let min_norm = face.combined.norm();
    Ok(ProjectedDirection {
        result: DirectionResult { direction: &face.step * nu, raw_direction: face.combined, xi: face.xi, nu, min_norm },
        active,
        ineq_multipliers: lam,
        eq_multipliers: mu,
        cosine: face.cosine,
    })
}

/// Outcome of [`project_onto_region`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub x: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Euclidean projection onto `{Aᵀx + a ≤ 0, Bᵀx + b = 0}` by cyclic dual
/// coordinate ascent (Hildreth's method). Stops once no dual moves `x` by
/// more than `tol` in a sweep.
pub fn project_onto_region(
    region: &LinearFeasibleRegion,
    x: &DVector<f64>,
    max_sweeps: usize,
    tol: f64,
) -> Result<Projection> {
    if x.len() != region.dim() {
        return Err(Error::Dimension("point does not match the region".into()));
    }
    let am = &region.ineq_matrix;
    let bm = &region.eq_matrix;
    let rn2: Vec<f64> = am.column_iter().map(|c| c.norm_squared()).collect();
    let bn2: Vec<f64> = bm.column_iter().map(|c| c.norm_squared()).collect();
    let mut x = x.clone();
    let mut lam: DVector<f64> = DVector::zeros(region.n_ineq());
    let mut mu: DVector<f64> = DVector::zeros(region.n_eq());
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut moved = 0.0_f64;
        for i in 0..am.ncols() {
            if rn2[i] == 0.0 {
                continue;
            }
            let col = am.column(i);
            let d = col.dot(&x) + region.ineq_offset[i];
            let new = (lam[i] + d / rn2[i]).max(0.0);
            let dl = new - lam[i];
            if dl != 0.0 {
                x.axpy(-dl, &col, 1.0);
                lam[i] = new;
                moved = moved.max(dl.abs() * rn2[i].sqrt());
            }
        }
        for j in 0..bm.ncols() {
            if bn2[j] == 0.0 {
                continue;
            }
            let col = bm.column(j);
            let dm = (col.dot(&x) + region.eq_offset[j]) / bn2[j];
            x.axpy(-dm, &col, 1.0);
            mu[j] += dm;
            moved = moved.max(dm.abs() * bn2[j].sqrt());
        }
        if moved < tol {
            converged = true;
            break;
        }
    }
    Ok(Projection { x, ineq_duals: lam, eq_duals: mu, sweeps, converged })
}

/// `η^p = η₀·(1 + cos(g₁, g₂))`; `η₀` when either gradient vanishes.
pub fn adaptive_primal_step(g1: &DVector<f64>, g2: &DVector<f64>, eta0: f64) -> f64 {
    match cosine(g1, g2) {
        Some(c) => eta0 * (1.0 + c),
        None => eta0,
    }
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let d = a.norm() * b.norm();
    (d > 0.0).then(|| (a.dot(b) / d).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionRule {
    Literal,
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimalStep {
    Fixed {
        eta: f64,
    },
    /// `η₀·max(1 + cos, floor)`, the cosine taken between the first two
    /// (projected, under [`DirectionRule::Projected`]) gradients.
    Adaptive {
        eta0: f64,
        floor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub rule: DirectionRule,
    pub primal: PrimalStep,
    /// Dual step of constraint row `i` is `dual_scale/‖row_i‖` (literal rule).
    pub dual_scale: f64,
    pub nu_max: f64,
    /// Restoration sweeps and tolerance (projected rule).
    pub restore_sweeps: usize,
    pub restore_tol: f64,
    pub active_set: ActiveSetOptions,
    /// Step multiplier applied when consecutive projected steps point against
    /// each other, recovering by `1/√backoff` per agreeing step; 1 disables
    /// it (projected rule).
    pub backoff: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            rule: DirectionRule::Projected,
            primal: PrimalStep::Adaptive { eta0: 1.0, floor: 0.05 },
            dual_scale: 0.1,
            nu_max: 1.0,
            restore_sweeps: 2000,
            restore_tol: 1e-10,
            active_set: ActiveSetOptions::default(),
            backoff: 0.5,
        }
    }
}

/// Stop when `min_norm ≤ stationarity_abs + stationarity_rel·Σ‖∇f_j‖` and the
/// largest constraint violation is at most `feasibility`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceSet {
    pub stationarity_abs: f64,
    pub stationarity_rel: f64,
    pub feasibility: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self { stationarity_abs: 1e-9, stationarity_rel: 1e-5, feasibility: 1e-4 }
    }
}

/// Inequality and equality multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub ineq: DVector<f64>,
    pub eq: DVector<f64>,
}

impl Duals {
    pub fn zeros(region: &LinearFeasibleRegion) -> Self {
        Self { ineq: DVector::zeros(region.n_ineq()), eq: DVector::zeros(region.n_eq()) }
    }
}

/// One completed iteration, measured at the iterate the step started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmaRecord {
    pub iter: usize,
    pub values: Vec<f64>,
    /// Cosine that drove the step size (projected gradients under the
    /// projected rule).
    pub cosine: Option<f64>,
    /// Cosine of the unprojected first two gradients.
    pub raw_cosine: Option<f64>,
    /// Unnormalised inner product of the first two gradients.
    pub inner_product: Option<f64>,
    pub min_norm: f64,
    pub nu: f64,
    pub xi: Vec<f64>,
    pub eta: f64,
    pub max_ineq_gap: f64,
    pub eq_gap: f64,
    pub stationary: bool,
}

/// Values, jacobian and constraint system at one point. The region may
/// depend on the point (e.g. a budget row priced at the current costs).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub region: LinearFeasibleRegion,
}

/// A constrained vector problem queried point by point.
pub trait VectorProblem {
    fn dim(&self) -> usize;
    fn n_objectives(&self) -> usize;
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<Evaluation>;
}

/// Fixed region plus an [`ObjectiveBundle`].
pub struct BundleProblem<'a> {
    pub bundle: &'a dyn ObjectiveBundle,
    pub region: &'a LinearFeasibleRegion,
}

impl VectorProblem for BundleProblem<'_> {
    fn dim(&self) -> usize {
        self.region.dim()
    }
    fn n_objectives(&self) -> usize {
        self.bundle.n_objectives()
    }
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<Evaluation> {
        Ok(Evaluation { values: self.bundle.values(x), jacobian: self.bundle.jacobian(x), region: self.region.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIterations,
    Diverged { iter: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlmaOutcome {
    pub x: DVector<f64>,
    pub duals: Duals,
    pub trace: Vec<AlmaRecord>,
    pub status: Status,
    /// Evaluation at the terminal iterate and its min-norm weights.
    pub last: Option<(Evaluation, DVector<f64>)>,
}

impl AlmaOutcome {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    /// `Err` for a diverged run; the trace stays available on `self`.
    pub fn check(&self) -> Result<()> {
        match self.status {
            Status::Diverged { iter } => Err(Error::Diverged { iter, msg: "non-finite iterate".into() }),
            _ => Ok(()),
        }
    }
}

/// Options for [`run_problem`] beyond the step schedule.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Fixed weights, bypassing the min-norm problem (single-objective
    /// baselines).
    pub pinned_weights: Option<DVector<f64>>,
}

/// Per-iteration callback: the record, the evaluation it was measured on and
/// the iterate.
pub type Observer<'a> = &'a mut dyn FnMut(&AlmaRecord, &Evaluation, &DVector<f64>);

/// Generic constrained multi-gradient ascent loop.
#[allow(clippy::too_many_arguments)]
pub fn run_problem(
    problem: &mut dyn VectorProblem,
    x0: &DVector<f64>,
    duals0: Option<Duals>,
    schedule: &StepSchedule,
    max_iter: usize,
    tol: &ToleranceSet,
    opts: &RunOptions,
    mut observer: Option<Observer<'_>>,
) -> Result<AlmaOutcome> {
    if max_iter == 0 {
        return Err(Error::Usage("max_iter must be at least 1".into()));
    }
    if x0.len() != problem.dim() {
        return Err(Error::Dimension(format!("x0 has {} entries, problem has {}", x0.len(), problem.dim())));
    }
    let mut x = x0.clone();
    if schedule.rule == DirectionRule::Projected && x.iter().all(|v| v.is_finite()) {
        // Start from the restoration of x0, as every later iterate is.
        let region = problem.evaluate(&x)?.region;
        x = project_onto_region(&region, &x, schedule.restore_sweeps, schedule.restore_tol)?.x;
    }
    let mut trace = Vec::new();
    let mut duals = duals0;
    let mut last = None;
    let mut status = Status::MaxIterations;
    // Zig-zag damping between faces that are almost parallel.
    let mut damping = 1.0_f64;
    let mut prev_step: Option<DVector<f64>> = None;
    for iter in 0..max_iter {
        if x.iter().any(|v| !v.is_finite()) {
            status = Status::Diverged { iter };
            break;
        }
        let ev = problem.evaluate(&x)?;
        if ev.values.iter().chain(ev.jacobian.iter()).any(|v| !v.is_finite()) {
            status = Status::Diverged { iter };
            break;
        }
        let region = &ev.region;
        let mut d = match duals.take() {
            Some(d) if d.ineq.len() == region.n_ineq() && d.eq.len() == region.n_eq() => d,
            Some(_) => return Err(Error::Dimension("initial duals do not match the constraints".into())),
            None => Duals::zeros(region),
        };
        let gaps = constraint_gaps(region, &x)?;
        let jac = &ev.jacobian;
        let gnorm: f64 = jac.column_iter().map(|c| c.norm()).sum();
        let (g1, g2) = (jac.column(0).into_owned(), (jac.ncols() >= 2).then(|| jac.column(1).into_owned()));
        let raw_cosine = g2.as_ref().and_then(|g2| cosine(&g1, g2));
        let inner_product = g2.as_ref().map(|g2| g1.dot(g2));

        let (dir, cos_used, x_next) = match schedule.rule {
            DirectionRule::Literal => {
                let mut dir = match &opts.pinned_weights {
                    Some(xi) => {
                        let w = jac * xi;
                        let omega = omega_region(region, &gaps)?;
                        let nu = max_scaling(&w, &omega, schedule.nu_max)?;
                        DirectionResult { xi: xi.clone(), min_norm: w.norm(), direction: &w * nu, raw_direction: w, nu }
                    }
                    None => direction_for_jacobian(jac, region, &x, schedule.nu_max)?,
                };
                for (i, col) in region.ineq_matrix.column_iter().enumerate() {
                    let eta = schedule.dual_scale / col.norm().max(f64::MIN_POSITIVE);
                    d.ineq[i] = (d.ineq[i] + dir.nu * eta * gaps.ineq_gap[i]).max(0.0);
                }
                for (j, col) in region.eq_matrix.column_iter().enumerate() {
                    let eta = schedule.dual_scale / col.norm().max(f64::MIN_POSITIVE);
                    d.eq[j] += dir.nu * eta * gaps.eq_gap[j];
                }
                let eta = primal_eta(&schedule.primal, raw_cosine);
                let delta = &dir.direction - &region.ineq_matrix * &d.ineq - &region.eq_matrix * &d.eq;
                let x_next = &x + &delta * eta;
                dir.direction = delta;
                (dir, raw_cosine, (x_next, eta))
            }
            DirectionRule::Projected => {
                let pd = projected_direction(
                    jac,
                    region,
                    &x,
                    schedule.nu_max,
                    opts.pinned_weights.as_ref(),
                    &schedule.active_set,
                )?;
                if prev_step.as_ref().is_some_and(|s| s.dot(&pd.result.direction) < 0.0) {
                    damping *= schedule.backoff;
                } else {
                    damping = (damping / schedule.backoff.sqrt()).min(1.0);
                }
                let eta = primal_eta(&schedule.primal, pd.cosine) * damping;
                let moved = &x + &pd.result.direction * eta;
                let proj = project_onto_region(region, &moved, schedule.restore_sweeps, schedule.restore_tol)?;
                prev_step = Some(&proj.x - &x);
                d = Duals { ineq: pd.ineq_multipliers, eq: pd.eq_multipliers };
                (pd.result, pd.cosine, (proj.x, eta))
            }
        };

        let stationary = dir.min_norm <= tol.stationarity_abs + tol.stationarity_rel * gnorm;
        let feasible = gaps.max_violation() <= tol.feasibility;
        let rec = AlmaRecord {
            iter,
            values: ev.values.iter().copied().collect(),
            cosine: cos_used,
            raw_cosine,
            inner_product,
            min_norm: dir.min_norm,
            nu: dir.nu,
            xi: dir.xi.iter().copied().collect(),
            eta: x_next.1,
            max_ineq_gap: gaps.max_ineq_violation(),
            eq_gap: gaps.max_eq_violation(),
            stationary,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec, &ev, &x);
        }
        trace.push(rec);
        duals = Some(d);
        if stationary && feasible {
            last = Some((ev, dir.xi));
            status = Status::Converged;
            break;
        }
        last = Some((ev, dir.xi));
        x = x_next.0;
    }
    let duals = match (duals, &last) {
        (Some(d), _) => d,
        (None, Some((ev, _))) => Duals::zeros(&ev.region),
        (None, None) => Duals { ineq: DVector::zeros(0), eq: DVector::zeros(0) },
    };
    Ok(AlmaOutcome { x, duals, trace, status, last })
}

fn primal_eta(rule: &PrimalStep, cos: Option<f64>) -> f64 {
    match *rule {
        PrimalStep::Fixed { eta } => eta,
        PrimalStep::Adaptive { eta0, floor } => eta0 * cos.map_or(1.0, |c| (1.0 + c).max(floor)),
    }
}

/// Constrained ascent on a fixed region.
pub fn run_alma(
    bundle: &dyn ObjectiveBundle,
    region: &LinearFeasibleRegion,
    x0: &DVector<f64>,
    duals0: Option<Duals>,
    schedule: &StepSchedule,
    max_iter: usize,
    tol: &ToleranceSet,
) -> Result<AlmaOutcome> {
    let mut problem = BundleProblem { bundle, region };
    run_problem(&mut problem, x0, duals0, schedule, max_iter, tol, &RunOptions::default(), None)
}
