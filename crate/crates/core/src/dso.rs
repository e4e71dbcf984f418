//! The bilevel allocation loop.
//!
//! The DSO owns the allocation `p` over aggregators. Every outer iteration the
//! aggregators clear their auctions at the current `p_k`; by the equilibrium
//! property the resulting unit costs are the welfare gradient `∇𝒲 = c`. The
//! fairness gradient is that of Jain's index over `x_k = p_k/(c_k·G_k)` with
//! `c` held fixed. A constrained multi-gradient step on `(𝒲, ℛ)` then moves
//! `p` within the feeder constraints.
//!
//! [`dso_iteration`] is one step of the plain augmented-Lagrangian scheme (duals ascend along the
//! gaps, `p` moves by `η^p·Δp`). [`run_bilevel`] drives the same problem
//! through [`crate::mgda::run_problem`], by default with the projected
//! active-set rule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::fairness_objective;
use crate::grid::GridConstraints;
use crate::market::{run_auction, AggregatorState, AuctionConfig};
use crate::mgda::{
    adaptive_primal_step, cosine, direction_for_jacobian, run_problem, Duals, Evaluation, RunOptions, Status,
    VectorProblem,
};
use crate::scenario::{Instance, Scenario, SolverSettings};
use crate::vecopt::{constraint_gaps, fritz_john_residual, FritzJohnResidual};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Welfare and fairness.
    Tradeoff,
    /// Welfare only (`ξ = [1, 0]`); fairness is still reported.
    EfficientOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tradeoff" => Ok(Mode::Tradeoff),
            "efficient_only" | "efficient" => Ok(Mode::EfficientOnly),
            other => Err(Error::Usage(format!("mode must be tradeoff or efficient_only, got {other:?}"))),
        }
    }
}

/// Dual step sizes per constraint block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSteps {
    /// One per voltage row (shared by both sides).
    pub eta_v: DVector<f64>,
    pub eta_s: DVector<f64>,
    pub eta_p0: f64,
    pub eta_b: f64,
}

impl DualSteps {
    /// `scale/‖row‖` for every constraint row, with the budget row priced at `c`.
    pub fn row_normalized(gc: &GridConstraints, c: &DVector<f64>, scale: f64) -> Self {
        let inv = |n: f64| if n > 0.0 { scale / n } else { scale };
        Self {
            eta_v: DVector::from_iterator(gc.c_v.nrows(), gc.c_v.row_iter().map(|r| inv(r.norm()))),
            eta_s: DVector::from_iterator(gc.c_s.nrows(), gc.c_s.row_iter().map(|r| inv(r.norm()))),
            eta_p0: inv(gc.c_p0.norm()),
            eta_b: inv(c.norm()),
        }
    }
}

/// Allocation, duals and counters of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsoState {
    pub p: DVector<f64>,
    pub alpha_lo: DVector<f64>,
    pub alpha_hi: DVector<f64>,
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub k: usize,
    pub eta_p: f64,
}

impl DsoState {
    pub fn new(p: DVector<f64>, gc: &GridConstraints) -> Self {
        let nv = gc.c_v.nrows();
        Self {
            p,
            alpha_lo: DVector::zeros(nv),
            alpha_hi: DVector::zeros(nv),
            beta: DVector::zeros(gc.c_s.nrows()),
            lambda: 0.0,
            gamma: 0.0,
            k: 0,
            eta_p: 0.0,
        }
    }

    /// `1e-3·P0/A` everywhere, zero duals.
    pub fn initial(gc: &GridConstraints, fraction: f64) -> Self {
        let a = gc.n_aggregators();
        Self::new(DVector::from_element(a, fraction * gc.p0 / a as f64), gc)
    }

    /// Duals in the column order of [`GridConstraints::region`].
    pub fn duals(&self) -> Duals {
        let mut ineq = Vec::with_capacity(2 * self.alpha_lo.len() + self.beta.len() + 1);
        ineq.extend(self.alpha_lo.iter());
        ineq.extend(self.alpha_hi.iter());
        ineq.extend(self.beta.iter());
        ineq.push(self.gamma);
        Duals { ineq: DVector::from_vec(ineq), eq: DVector::from_element(1, self.lambda) }
    }

    pub fn set_duals(&mut self, d: &Duals) -> Result<()> {
        let nv = self.alpha_lo.len();
        let ns = self.beta.len();
        if d.ineq.len() != 2 * nv + ns + 1 || d.eq.len() != 1 {
            return Err(Error::Dimension("duals do not match the grid blocks".into()));
        }
        self.alpha_lo = d.ineq.rows(0, nv).into_owned();
        self.alpha_hi = d.ineq.rows(nv, nv).into_owned();
        self.beta = d.ineq.rows(2 * nv, ns).into_owned();
        self.gamma = d.ineq[2 * nv + ns];
        self.lambda = d.eq[0];
        Ok(())
    }
}

/// One row of the outer-loop log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub welfare: f64,
    pub fairness: f64,
    /// Cosine between the (face-projected) welfare and fairness gradients.
    pub cosine: f64,
    /// Cosine between the raw gradients `c` and `g`.
    pub raw_cosine: f64,
    /// Raw inner product `cᵀg`.
    pub inner_product: f64,
    pub min_norm: f64,
    pub nu: f64,
    pub xi: [f64; 2],
    pub eta: f64,
    pub max_ineq_gap: f64,
    pub eq_gap: f64,
    pub c: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// Clears every aggregator's auction at its allocation (in parallel) and
/// returns the unit costs and the number of auctions that hit their cap.
pub fn clear_auctions(
    aggregators: &mut [AggregatorState],
    p: &DVector<f64>,
    cfg: &AuctionConfig,
) -> Result<(DVector<f64>, usize)> {
    if aggregators.len() != p.len() {
        return Err(Error::Dimension(format!("{} aggregators, {} allocations", aggregators.len(), p.len())));
    }
    let outcomes: Vec<_> = aggregators
        .par_iter_mut()
        .zip(p.as_slice().par_iter())
        .map(|(agg, &pk)| run_auction(agg, pk, cfg))
        .collect::<Result<_>>()?;
    let failures = outcomes.iter().filter(|o| !o.converged).count();
    Ok((DVector::from_iterator(p.len(), outcomes.iter().map(|o| o.unit_cost)), failures))
}

pub fn welfare(aggregators: &[AggregatorState]) -> Result<f64> {
    aggregators.iter().map(|a| a.aggregator_utility()).sum()
}

/// One plain augmented-Lagrangian step: auctions, gradients, gaps, direction, dual
/// ascent, primal move. Returns the updated state and its log row.
pub fn dso_iteration(
    state: &DsoState,
    aggregators: &mut [AggregatorState],
    gc: &GridConstraints,
    nu_max: f64,
    steps: Option<&DualSteps>,
    eta0: f64,
    auction: &AuctionConfig,
) -> Result<(DsoState, IterationRecord)> {
    let counts: Vec<usize> = aggregators.iter().map(|a| a.agent_count()).collect();
    // 1. costs from the auctions
    let (c, _) = clear_auctions(aggregators, &state.p, auction)?;
    // 2. fairness gradient
    let (fairness, g) = fairness_objective(&state.p, &c, &counts)?;
    // 3–4. gaps and the assembled system
    let region = gc.region(&c)?;
    let gaps = constraint_gaps(&region, &state.p)?;
    let nv = gc.c_v.nrows();
    let ns = gc.c_s.nrows();
    let d_lo = gaps.ineq_gap.rows(0, nv);
    let d_hi = gaps.ineq_gap.rows(nv, nv);
    let d_s = gaps.ineq_gap.rows(2 * nv, ns);
    let d_b = gaps.ineq_gap[2 * nv + ns];
    let d_p0 = gaps.eq_gap[0];
    // 5–8. direction
    let jac = DMatrix::from_columns(&[c.clone(), g.clone()]);
    let dir = direction_for_jacobian(&jac, &region, &state.p, nu_max)?;
    let nu = dir.nu;
    // 9. duals
    let default_steps;
    let steps = match steps {
        Some(s) => s,
        None => {
            default_steps = DualSteps::row_normalized(gc, &c, 0.1);
            &default_steps
        }
    };
    let mut next = state.clone();
    for r in 0..nv {
        next.alpha_lo[r] = (state.alpha_lo[r] + nu * steps.eta_v[r] * d_lo[r]).max(0.0);
        next.alpha_hi[r] = (state.alpha_hi[r] + nu * steps.eta_v[r] * d_hi[r]).max(0.0);
    }
    for r in 0..ns {
        next.beta[r] = (state.beta[r] + nu * steps.eta_s[r] * d_s[r]).max(0.0);
    }
    next.lambda = state.lambda + nu * steps.eta_p0 * d_p0;
    next.gamma = (state.gamma + nu * steps.eta_b * d_b).max(0.0);
    // 10. primal
    let delta = &dir.direction + gc.c_v.tr_mul(&next.alpha_lo)
        - gc.c_v.tr_mul(&next.alpha_hi)
        - gc.c_s.tr_mul(&next.beta)
        - &gc.c_p0 * next.lambda
        + &c * next.gamma;
    next.eta_p = adaptive_primal_step(&c, &g, eta0);
    next.p = &state.p + delta * next.eta_p;
    // 11–12.
    next.k = state.k + 1;
    if next.p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { iter: state.k, msg: "allocation became non-finite".into() });
    }
    let rec = IterationRecord {
        iter: state.k,
        welfare: welfare(aggregators)?,
        fairness,
        cosine: cosine(&c, &g).unwrap_or(0.0),
        raw_cosine: cosine(&c, &g).unwrap_or(0.0),
        inner_product: c.dot(&g),
        min_norm: dir.min_norm,
        nu,
        xi: [dir.xi[0], dir.xi[1]],
        eta: next.eta_p,
        max_ineq_gap: gaps.max_ineq_violation(),
        eq_gap: gaps.max_eq_violation(),
        c: c.iter().copied().collect(),
        p: state.p.iter().copied().collect(),
    };
    Ok((next, rec))
}

/// The allocation problem seen by the generic ascent loop.
pub struct DsoProblem<'a> {
    pub aggregators: &'a mut [AggregatorState],
    pub constraints: &'a GridConstraints,
    pub auction: AuctionConfig,
    counts: Vec<usize>,
    /// Auctions that stopped at their iteration cap, summed over calls.
    pub auction_failures: usize,
}

impl<'a> DsoProblem<'a> {
    pub fn new(
        aggregators: &'a mut [AggregatorState],
        constraints: &'a GridConstraints,
        auction: AuctionConfig,
    ) -> Self {
        let counts = aggregators.iter().map(|a| a.agent_count()).collect();
        Self { aggregators, constraints, auction, counts, auction_failures: 0 }
    }
}

impl VectorProblem for DsoProblem<'_> {
    fn dim(&self) -> usize {
        self.aggregators.len()
    }
    fn n_objectives(&self) -> usize {
        2
    }
    fn evaluate(&mut self, p: &DVector<f64>) -> Result<Evaluation> {
        let (c, failures) = clear_auctions(self.aggregators, p, &self.auction)?;
        self.auction_failures += failures;
        let (fair, g) = fairness_objective(p, &c, &self.counts)?;
        let w = welfare(self.aggregators)?;
        Ok(Evaluation {
            values: DVector::from_vec(vec![w, fair]),
            jacobian: DMatrix::from_columns(&[c.clone(), g]),
            // Aggregators only buy from the DSO; below zero some auctions have
            // nothing left to clear.
            region: self.constraints.region(&c)?.with_lower_bounds(0.0),
        })
    }
}

/// Result of [`run_bilevel`].
#[derive(Debug, Clone)]
pub struct BilevelOutcome {
    pub state: DsoState,
    pub trace: IterationTrace,
    pub status: Status,
    /// Unit costs and objective values at the terminal allocation.
    pub costs: DVector<f64>,
    pub welfare: f64,
    pub fairness: f64,
    /// Fritz-John residual of the terminal point with the final weights and
    /// multipliers.
    pub fritz_john: Option<FritzJohnResidual>,
    pub auction_failures: usize,
}

impl BilevelOutcome {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// `Err` for a diverged run; the partial trace stays on `self`.
    pub fn check(&self) -> Result<()> {
        match self.status {
            Status::Diverged { iter } => Err(Error::Diverged {
                iter,
                msg: format!("non-finite allocation after {} logged iterations", self.trace.len()),
            }),
            _ => Ok(()),
        }
    }
}

/// Runs the outer loop on `instance` until stationary and feasible or
/// `settings.max_outer` iterations. Aggregator books persist in `instance`,
/// so a second call warm-starts the auctions. A non-finite iterate ends the
/// run with [`Status::Diverged`]; see [`BilevelOutcome::check`].
pub fn run_bilevel(
    instance: &mut Instance,
    mode: Mode,
    settings: &SolverSettings,
    start: Option<&DsoState>,
) -> Result<BilevelOutcome> {
    let gc = &instance.constraints;
    let mut state = match start {
        Some(s) => s.clone(),
        None => DsoState::initial(gc, settings.init_fraction),
    };
    if state.p.len() != gc.n_aggregators() {
        return Err(Error::Dimension("starting allocation does not match the feeder".into()));
    }
    let schedule = settings.schedule();
    let opts = RunOptions { pinned_weights: (mode == Mode::EfficientOnly).then(|| DVector::from_vec(vec![1.0, 0.0])) };
    let mut trace = IterationTrace::default();
    let mut observer = |rec: &crate::mgda::AlmaRecord, ev: &Evaluation, p: &DVector<f64>| {
        trace.records.push(IterationRecord {
            iter: rec.iter,
            welfare: rec.values[0],
            fairness: rec.values[1],
            cosine: rec.cosine.unwrap_or(0.0),
            raw_cosine: rec.raw_cosine.unwrap_or(0.0),
            inner_product: rec.inner_product.unwrap_or(0.0),
            min_norm: rec.min_norm,
            nu: rec.nu,
            xi: [rec.xi[0], rec.xi[1]],
            eta: rec.eta,
            max_ineq_gap: rec.max_ineq_gap,
            eq_gap: rec.eq_gap,
            c: ev.jacobian.column(0).iter().copied().collect(),
            p: p.iter().copied().collect(),
        });
    };
    let a = state.p.len();
    let mut duals0 = state.duals();
    let n_grid = duals0.ineq.len();
    duals0.ineq = duals0.ineq.resize_vertically(n_grid + a, 0.0);
    let mut problem = DsoProblem::new(&mut instance.aggregators, gc, settings.auction);
    let out = run_problem(
        &mut problem,
        &state.p,
        Some(duals0),
        &schedule,
        settings.max_outer,
        &settings.tolerances,
        &opts,
        Some(&mut observer),
    )?;
    let auction_failures = problem.auction_failures;
    let k0 = state.k;
    state.p = out.x.clone();
    state.k = k0 + out.trace.len();
    state.eta_p = out.trace.last().map_or(0.0, |r| r.eta);
    if out.duals.ineq.len() == n_grid + a {
        let grid = Duals { ineq: out.duals.ineq.rows(0, n_grid).into_owned(), eq: out.duals.eq.clone() };
        state.set_duals(&grid)?;
    }
    let (costs, welfare, fairness, fritz_john) = match &out.last {
        Some((ev, xi)) => {
            let fj = fritz_john_residual(&ev.region, &ev.jacobian, &out.x, xi, &out.duals.ineq, &out.duals.eq).ok();
            (ev.jacobian.column(0).into_owned(), ev.values[0], ev.values[1], fj)
        }
        None => (DVector::zeros(state.p.len()), f64::NAN, f64::NAN, None),
    };
    Ok(BilevelOutcome { state, trace, status: out.status, costs, welfare, fairness, fritz_john, auction_failures })
}

/// One terminal point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub run: usize,
    pub welfare: f64,
    pub fairness: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Independent tradeoff runs from seeded random starts. The starting
/// allocation of each run is `U(spread₀, spread₁)·P0/A` per aggregator,
/// rescaled onto the energy balance; starting duals are small and random.
/// A failed run is recorded and the sweep continues.
pub fn pareto_sweep(scenario: &Scenario, runs: usize, seed: u64, spread: [f64; 2]) -> Result<Vec<SweepPoint>> {
    if runs < 2 {
        return Err(Error::Usage(format!("a sweep needs at least 2 runs, got {runs}")));
    }
    if !(spread[0] > 0.0 && spread[0] <= spread[1]) {
        return Err(Error::Usage("sweep spread needs 0 < low ≤ high".into()));
    }
    let base = scenario.instantiate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..runs).map(|_| master.gen()).collect();
    let points = seeds
        .par_iter()
        .enumerate()
        .map(|(run, &s)| {
            let mut inst = base.clone();
            let gc = &inst.constraints;
            let a = gc.n_aggregators();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut p = DVector::from_fn(a, |_, _| rng.gen_range(spread[0]..=spread[1]) * gc.p0 / a as f64);
            let total = gc.c_p0.dot(&p);
            p *= (gc.p0 - gc.c_p00) / total;
            let mut start = DsoState::new(p, gc);
            start.alpha_lo.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1e-6));
            start.alpha_hi.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1e-6));
            start.beta.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1e-6));
            start.gamma = rng.gen_range(0.0..1e-6);
            start.lambda = rng.gen_range(-1e-6..1e-6);
            match run_bilevel(&mut inst, Mode::Tradeoff, &scenario.solver, Some(&start))
                .and_then(|o| o.check().map(|_| o))
            {
                Ok(out) => SweepPoint {
                    run,
                    welfare: out.welfare,
                    fairness: out.fairness,
                    iterations: out.iterations(),
                    converged: out.converged(),
                    error: None,
                },
                Err(e) => SweepPoint {
                    run,
                    welfare: f64::NAN,
                    fairness: f64::NAN,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(points)
}
