//! Prosumer agents and the per-aggregator double auction.
//!
//! Each aggregator clears a uniform unit cost `c_k` among its agents. Power
//! bidders (sellers) answer a posted cost with a quantity; cost bidders
//! (buyers) answer with a monetary bid and receive a proportional share of the
//! supply. The loop stops when `c_k` settles and nobody changes sides, at
//! which point every participating agent sits where its marginal utility
//! equals `c_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Utility of consuming `x ≥ 0` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Utility {
    /// `a·ln(1 + b·x)`: concave.
    Log { a: f64, b: f64 },
    /// `a·x² / (b + x²)`: S-shaped, quasiconcave but not concave.
    Sigmoid { a: f64, b: f64 },
}

impl Utility {
    pub fn value(&self, x: f64) -> Result<f64> {
        match *self {
            Utility::Log { a, b } => {
                if 1.0 + b * x <= 0.0 {
                    return Err(Error::Domain(format!("log utility needs 1 + b·x > 0, got x = {x}")));
                }
                Ok(a * (b * x).ln_1p())
            }
            Utility::Sigmoid { a, b } => {
                if x < 0.0 {
                    return Err(Error::Domain(format!("sigmoid utility needs x ≥ 0, got {x}")));
                }
                Ok(a * x * x / (b + x * x))
            }
        }
    }

    pub fn marginal(&self, x: f64) -> Result<f64> {
        match *self {
            Utility::Log { a, b } => {
                if 1.0 + b * x <= 0.0 {
                    return Err(Error::Domain(format!("log utility needs 1 + b·x > 0, got x = {x}")));
                }
                Ok(a * b / (1.0 + b * x))
            }
            Utility::Sigmoid { a, b } => {
                if x < 0.0 {
                    return Err(Error::Domain(format!("sigmoid utility needs x ≥ 0, got {x}")));
                }
                let d = b + x * x;
                Ok(2.0 * a * b * x / (d * d))
            }
        }
    }

    /// `argmax_{y ≥ 0} u(y) − c·y`.
    ///
    /// The sigmoid family only has an interior optimum on its concave branch
    /// `y ≥ √(b/3)`, and only when that beats consuming nothing; demand
    /// therefore drops to zero discontinuously above a threshold cost.
    pub fn demand(&self, c: f64) -> f64 {
        match *self {
            Utility::Log { a, b } => (a / c - 1.0 / b).max(0.0),
            Utility::Sigmoid { a, b } => {
                let y_knee = (b / 3.0).sqrt();
                let u = Utility::Sigmoid { a, b };
                if u.marginal(y_knee).unwrap_or(0.0) <= c {
                    return 0.0;
                }
                let y = sigmoid_root(a, b, c, y_knee);
                // Only worth it if the surplus beats staying out.
                if a * y * y / (b + y * y) - c * y >= 0.0 {
                    y
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative, used by the equilibrium verifier's diagnostics.
    pub fn curvature(&self, x: f64) -> f64 {
        match *self {
            Utility::Log { a, b } => -a * b * b / (1.0 + b * x).powi(2),
            Utility::Sigmoid { a, b } => {
                let d = b + x * x;
                2.0 * a * b * (b - 3.0 * x * x) / d.powi(3)
            }
        }
    }
}

// Solve 2aby/(b+y²)² = c for y on the decreasing branch y ≥ y_knee.
fn sigmoid_root(a: f64, b: f64, c: f64, y_knee: f64) -> f64 {
    let mp = |y: f64| {
        let d = b + y * y;
        2.0 * a * b * y / (d * d)
    };
    let mut lo = y_knee;
    let mut hi = 2.0 * y_knee.max(1.0);
    while mp(hi) > c {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-14 * hi {
        let mid = 0.5 * (lo + hi);
        if mp(mid) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Which side of the book an agent is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Bids a quantity at the posted cost (typically a seller).
    Power,
    /// Bids a price for a share of the supply (a buyer).
    Cost,
}

/// A prosumer with PV generation `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub utility: Utility,
    /// Own generation; consumption is `power_bid + g`.
    pub g: f64,
    /// Net purchase (negative = net sale).
    #[serde(default)]
    pub power_bid: f64,
    /// Price per unit of current allocation bid by a buyer.
    #[serde(default)]
    pub cost_bid: f64,
}

impl Agent {
    pub fn new(id: usize, utility: Utility, g: f64) -> Self {
        Self { id, utility, g, power_bid: 0.0, cost_bid: 0.0 }
    }

    pub fn utility(&self, x: f64) -> Result<f64> {
        self.utility.value(x)
    }

    pub fn marginal_utility(&self, x: f64) -> Result<f64> {
        self.utility.marginal(x)
    }

    /// Net purchase that maximizes `u(x + g) − c·x`, never below `−g`.
    pub fn net_demand(&self, c: f64) -> f64 {
        self.utility.demand(c) - self.g
    }
}

/// `argmax_x u(x + g) − c·x` subject to `x + g ≥ 0`.
pub fn seller_best_response(agent: &Agent, c: f64) -> f64 {
    agent.net_demand(c)
}

/// Splits `S_k` among buyers in proportion to their monetary bids `c_i·p_i`.
pub fn proportional_allocation(buyers: &[(f64, f64)], supply: f64, revenue: f64) -> Result<Vec<f64>> {
    if !(revenue > 0.0) {
        return Err(Error::Domain("no willing buyers (zero revenue)".into()));
    }
    if supply < 0.0 {
        return Err(Error::Domain(format!("negative supply {supply}")));
    }
    Ok(buyers.iter().map(|&(p, c)| c * p / revenue * supply).collect())
}

/// Best bid of a buyer currently holding `p_i`, treating `S_k` and `R_k` as
/// fixed: `(S p_i/R)·u′((S p_i/R)·x + g) = p_i`, i.e. the bid buys exactly the
/// demand at the effective price `R/S`.
pub fn buyer_cost_bid(agent: &Agent, p_i: f64, supply: f64, revenue: f64) -> Result<f64> {
    if !(p_i > 0.0 && supply > 0.0 && revenue > 0.0) {
        return Err(Error::Domain(format!(
            "buyer bid needs positive allocation, supply and revenue (got {p_i}, {supply}, {revenue})"
        )));
    }
    let price = revenue / supply;
    let y = agent.net_demand(price).max(0.0);
    Ok(y * revenue / (supply * p_i))
}

/// Auction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuctionConfig {
    /// Relative tolerance on `c_k` between iterations.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting unit cost on a cold start.
    pub initial_cost: f64,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, initial_cost: 1.0 }
    }
}

/// Result of one call to [`run_auction`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    pub unit_cost: f64,
    /// Net purchase of every agent, in agent order.
    pub allocations: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of times the cost step had to be damped.
    pub damped: usize,
}

/// One aggregator's book. Persisting it between calls warm-starts the next
/// auction from the previous cost, roles and bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    pub id: usize,
    pub agents: Vec<Agent>,
    pub roles: Vec<Role>,
    pub unit_cost: f64,
    pub supply: f64,
    pub revenue: f64,
    pub allocation: f64,
    /// Monetary bids `c_i·p_i` of cost bidders.
    money: Vec<f64>,
    /// Damping factor on the cost update.
    theta: f64,
    started: bool,
}

impl AggregatorState {
    pub fn new(id: usize, agents: Vec<Agent>) -> Self {
        let n = agents.len();
        Self {
            id,
            agents,
            roles: vec![Role::Power; n],
            unit_cost: 0.0,
            supply: 0.0,
            revenue: 0.0,
            allocation: 0.0,
            money: vec![0.0; n],
            theta: 1.0,
            started: false,
        }
    }

    /// `G_k`.
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn power_bidders(&self) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.roles[i] == Role::Power).collect()
    }

    pub fn cost_bidders(&self) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.roles[i] == Role::Cost).collect()
    }

    /// Forget all auction history.
    pub fn reset(&mut self) {
        *self = Self::new(self.id, std::mem::take(&mut self.agents));
    }

    fn total_net_demand(&self, c: f64) -> f64 {
        self.agents.iter().map(|a| a.net_demand(c)).sum()
    }

    // Seed roles and bids from each agent's net position at cost c.
    fn cold_start(&mut self, c: f64) {
        self.unit_cost = c;
        for (i, a) in self.agents.iter_mut().enumerate() {
            let x = a.net_demand(c);
            if x > 0.0 {
                self.roles[i] = Role::Cost;
                self.money[i] = c * x;
                a.power_bid = x;
                a.cost_bid = c;
            } else {
                self.roles[i] = Role::Power;
                self.money[i] = 0.0;
                a.power_bid = x;
                a.cost_bid = 0.0;
            }
        }
        self.theta = 1.0;
        self.started = true;
    }

    /// `𝒰_k = Σ u(p_i + g_i)`.
    pub fn aggregator_utility(&self) -> Result<f64> {
        self.agents.iter().map(|a| a.utility((a.power_bid + a.g).max(0.0))).sum()
    }

    /// Price-taking payoff of agent `i` if it scaled its current net position
    /// by `scale`. Deviations that would consume a negative amount (selling
    /// more than the agent generates) are a domain error.
    pub fn agent_payoff(&self, i: usize, scale: f64) -> Result<f64> {
        let a = &self.agents[i];
        let x = a.power_bid * scale;
        if x + a.g < 0.0 {
            return Err(Error::Domain(format!("agent {} cannot sell {} with generation {}", a.id, -x, a.g)));
        }
        Ok(a.utility(x + a.g)? - self.unit_cost * x)
    }
}

/// Runs the auction of one aggregator for allocation `p_k`.
///
/// Each round: (1–2) sellers whose best response turned into a purchase
/// become cost bidders, cost bidders priced out of the market become power
/// bidders; (3) `c_k ← c_k + θ(R_k/S_k − c_k)`; (4) sellers respond to `c_k`;
/// (5) `S_k = p_k − Σ_sellers p_i`; (6) the supply is split in proportion to
/// the monetary bids; (7) buyers rebid; (8) `R_k = Σ` monetary bids. `θ`
/// starts at 1 and is halved whenever the cost step flips sign without
/// shrinking by at least half.
pub fn run_auction(state: &mut AggregatorState, p_k: f64, cfg: &AuctionConfig) -> Result<AuctionOutcome> {
    if state.agents.is_empty() {
        return Err(Error::Usage(format!("aggregator {} has no agents", state.id)));
    }
    if !p_k.is_finite() {
        return Err(Error::Domain(format!("allocation {p_k} is not finite")));
    }
    let potential: f64 = state.agents.iter().map(|a| a.g).sum();
    if p_k + potential <= 0.0 {
        return Err(Error::Domain(format!("aggregator {}: allocation {p_k} leaves nothing to consume", state.id)));
    }
    state.allocation = p_k;
    if !state.started || !(state.unit_cost > 0.0) {
        let c0 = initial_cost(state, p_k, cfg.initial_cost);
        state.cold_start(c0);
    }
    // Warm starts keep cost, roles and bids but not the damping: a call that
    // sat on a demand jump must not freeze the next one.
    state.theta = 1.0;

    let n = state.agents.len();
    let mut c = state.unit_cost;
    let mut prev_step = 0.0_f64;
    let mut damped = 0;
    let mut converged = false;
    let mut iterations = 0;

    // Revenue and supply implied by the carried-over bids.
    let (mut s, mut r) = tally(state, p_k, c);

    for it in 0..cfg.max_iter {
        iterations = it + 1;
        // Steps 1–2: role reassignment.
        let mut switched = false;
        for i in 0..n {
            match state.roles[i] {
                Role::Power if state.agents[i].power_bid > 0.0 => {
                    state.roles[i] = Role::Cost;
                    state.money[i] = 0.0;
                    switched = true;
                }
                Role::Cost if state.money[i] <= 0.0 && state.agents[i].net_demand(c) <= 0.0 => {
                    state.roles[i] = Role::Power;
                    switched = true;
                }
                _ => {}
            }
        }

        // Step 3: cost update, damped and kept positive.
        let target = if s > 0.0 && r > 0.0 {
            r / s
        } else if s <= 0.0 {
            4.0 * c
        } else {
            0.25 * c
        };
        let mut step = state.theta * (target - c);
        step = step.clamp(-0.75 * c, 3.0 * c);
        if it > 0 && step * prev_step < 0.0 && step.abs() > 0.5 * prev_step.abs() {
            state.theta *= 0.5;
            step *= 0.5;
            damped += 1;
        }
        let c_new = c + step;
        let rel = (c_new - c).abs() / c;
        prev_step = step;
        c = c_new;

        // Steps 4–8 at the new cost.
        let (s_new, r_new) = clear_round(state, p_k, c);
        s = s_new;
        r = r_new;

        let pending = (0..n).any(|i| state.roles[i] == Role::Power && state.agents[i].power_bid > 0.0);
        if rel <= cfg.tol && !switched && !pending && (r / s - c).abs() <= cfg.tol * c {
            converged = true;
            break;
        }
    }

    state.unit_cost = c;
    state.supply = s;
    state.revenue = r;
    // Hand out the final split at the settled cost so the book is consistent.
    finalize(state, p_k, c);

    Ok(AuctionOutcome {
        unit_cost: c,
        allocations: state.agents.iter().map(|a| a.power_bid).collect(),
        iterations,
        converged,
        damped,
    })
}

// Bracket the clearing cost with a coarse geometric scan so cold starts begin
// close to equilibrium.
fn initial_cost(state: &AggregatorState, p_k: f64, fallback: f64) -> f64 {
    let mut c = if fallback > 0.0 { fallback } else { 1.0 };
    for _ in 0..200 {
        let d = state.total_net_demand(c);
        if d > p_k {
            c *= 1.25;
        } else if state.total_net_demand(c / 1.25) <= p_k {
            c /= 1.25;
        } else {
            break;
        }
    }
    c
}

fn tally(state: &AggregatorState, p_k: f64, _c: f64) -> (f64, f64) {
    let mut s = p_k;
    let mut r = 0.0;
    for (i, a) in state.agents.iter().enumerate() {
        match state.roles[i] {
            Role::Power => s -= a.power_bid,
            Role::Cost => r += state.money[i],
        }
    }
    (s, r)
}

// Steps 4–8 for one round at cost c; returns (S_k, R_k).
fn clear_round(state: &mut AggregatorState, p_k: f64, c: f64) -> (f64, f64) {
    let n = state.agents.len();
    // Step 4–5.
    let mut s = p_k;
    for i in 0..n {
        if state.roles[i] == Role::Power {
            let x = seller_best_response(&state.agents[i], c);
            state.agents[i].power_bid = x;
            state.agents[i].cost_bid = 0.0;
            // A seller that now wants to buy contributes nothing this round.
            s -= x.min(0.0);
        }
    }
    // Step 6.
    let r_prev: f64 = (0..n).filter(|&i| state.roles[i] == Role::Cost).map(|i| state.money[i]).sum();
    for i in 0..n {
        if state.roles[i] == Role::Cost {
            state.agents[i].power_bid = if r_prev > 0.0 { state.money[i] / r_prev * s.max(0.0) } else { 0.0 };
        }
    }
    // Step 7–8: buyers bid for their demand at the posted cost.
    let mut r = 0.0;
    for i in 0..n {
        if state.roles[i] == Role::Cost {
            let y = state.agents[i].net_demand(c).max(0.0);
            state.money[i] = c * y;
            let held = state.agents[i].power_bid;
            state.agents[i].cost_bid = if held > 0.0 { state.money[i] / held } else { 0.0 };
            r += state.money[i];
        }
    }
    (s, r)
}

fn finalize(state: &mut AggregatorState, p_k: f64, c: f64) {
    let n = state.agents.len();
    let mut s = p_k;
    for i in 0..n {
        if state.roles[i] == Role::Power {
            s -= state.agents[i].power_bid.min(0.0);
        }
    }
    let r: f64 = (0..n).filter(|&i| state.roles[i] == Role::Cost).map(|i| state.money[i]).sum();
    for i in 0..n {
        if state.roles[i] == Role::Cost {
            let y = if r > 0.0 { state.money[i] / r * s.max(0.0) } else { 0.0 };
            state.agents[i].power_bid = y;
            state.agents[i].cost_bid = if y > 0.0 { state.money[i] / y } else { 0.0 };
        } else if state.agents[i].power_bid > 0.0 {
            // Would-be buyer not yet served: holds nothing.
            state.agents[i].power_bid = 0.0;
        }
    }
    state.supply = s;
    state.revenue = r;
    state.unit_cost = c;
}

/// Per-agent marginal-condition residuals `|u′(p_i + g_i) − c_k|`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    /// `(agent id, residual)` for every agent consuming a positive amount.
    pub residuals: Vec<(usize, f64)>,
    pub max_residual: f64,
    /// Agents at the `p_i + g_i = 0` boundary or priced out; not checked.
    pub boundary: Vec<usize>,
    pub passed: bool,
    /// No agent was checked at all.
    pub vacuous: bool,
}

pub fn verify_equilibrium(state: &AggregatorState, tol: f64) -> EquilibriumReport {
    let c = state.unit_cost;
    let mut residuals = Vec::new();
    let mut boundary = Vec::new();
    for a in &state.agents {
        let y = a.power_bid + a.g;
        if y <= 1e-12 * (1.0 + a.g) {
            boundary.push(a.id);
            continue;
        }
        match a.marginal_utility(y) {
            Ok(m) => residuals.push((a.id, (m - c).abs())),
            Err(_) => boundary.push(a.id),
        }
    }
    let max_residual = residuals.iter().fold(0.0_f64, |m, &(_, r)| m.max(r));
    EquilibriumReport { vacuous: residuals.is_empty(), passed: max_residual <= tol, max_residual, residuals, boundary }
}

/// Net demand of the whole aggregator at cost `c` (its inverse is `c_k(p_k)`).
pub fn aggregate_net_demand(agents: &[Agent], c: f64) -> f64 {
    agents.iter().map(|a| a.net_demand(c)).sum()
}

/// Clearing cost for allocation `p_k` by bisection on `ln c`; an oracle for
/// tests and for seeding.
pub fn clearing_cost(agents: &[Agent], p_k: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if aggregate_net_demand(agents, mid.exp()) > p_k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn log(a: f64, b: f64) -> Utility {
        Utility::Log { a, b }
    }

    #[test]
    fn utility_values() {
        let u = log(2.0, 1.0);
        assert_eq!(u.value(0.0).unwrap(), 0.0);
        assert_eq!(u.marginal(0.0).unwrap(), 2.0);
        assert_relative_eq!(u.value(1.0).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(u.marginal(1.0).unwrap(), 1.0, epsilon = 1e-15);
        let s = Utility::Sigmoid { a: 1.0, b: 1.0 };
        assert_relative_eq!(s.value(1.0).unwrap(), 0.5);
        assert_relative_eq!(s.marginal(1.0).unwrap(), 0.5);
        assert!(u.value(-2.0).is_err());
        assert!(s.marginal(-0.1).is_err());
    }

    #[test]
    fn seller_responses() {
        assert_relative_eq!(seller_best_response(&Agent::new(0, log(2.0, 1.0), 3.0), 1.0), -2.0);
        assert_eq!(seller_best_response(&Agent::new(0, log(2.0, 1.0), 0.0), 2.0), 0.0);
        assert_relative_eq!(seller_best_response(&Agent::new(0, log(2.0, 1.0), 3.0), 1e12), -3.0);
    }

    #[test]
    fn sigmoid_demand_is_optimal() {
        let u = Utility::Sigmoid { a: 8.0, b: 1.5 };
        for &c in &[0.3, 1.0, 2.0, 2.4, 3.0] {
            let y = u.demand(c);
            let best = (0..=40000)
                .map(|i| i as f64 * 1e-3)
                .map(|z| u.value(z).unwrap() - c * z)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(u.value(y).unwrap() - c * y >= best - 1e-9, "c = {c}");
        }
    }

    #[test]
    fn proportional_split() {
        assert_eq!(proportional_allocation(&[(2.0, 1.5)], 7.0, 3.0).unwrap(), vec![7.0]);
        assert_eq!(proportional_allocation(&[(1.0, 1.0), (1.0, 1.0)], 4.0, 2.0).unwrap(), vec![2.0, 2.0]);
        let v = proportional_allocation(&[(1.0, 1.0), (3.0, 1.0)], 2.0, 4.0).unwrap();
        assert_relative_eq!(v[1] / v[0], 3.0);
        assert_relative_eq!(v[0] + v[1], 2.0, epsilon = 1e-12);
        assert!(proportional_allocation(&[(1.0, 0.0)], 1.0, 0.0).is_err());
    }

    #[test]
    fn buyer_bid_fixed_point() {
        let a = Agent::new(0, log(2.0, 1.0), 0.0);
        // One buyer holding the whole supply S = 1 at cost c: R = c·1.
        let c = 1.0;
        let x = buyer_cost_bid(&a, 1.0, 1.0, c).unwrap();
        assert_relative_eq!(x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(a.marginal_utility(1.0).unwrap(), x);
        // Closed form for the log family.
        let (p, s, r) = (0.7, 3.0, 2.2);
        let expect = 2.0 / p - (1.0 / 1.0 + 0.0) * r / (s * p);
        assert_relative_eq!(buyer_cost_bid(&a, p, s, r).unwrap(), expect, epsilon = 1e-12);
        assert!(buyer_cost_bid(&a, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn single_buyer_auction() {
        let mut st = AggregatorState::new(0, vec![Agent::new(0, log(2.0, 1.0), 0.0)]);
        let out = run_auction(&mut st, 1.0, &AuctionConfig::default()).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.unit_cost, 1.0, epsilon = 1e-7);
        assert_relative_eq!(out.allocations[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_identical_buyers() {
        let agents = vec![Agent::new(0, log(2.0, 1.0), 0.0), Agent::new(1, log(2.0, 1.0), 0.0)];
        let mut st = AggregatorState::new(0, agents);
        let out = run_auction(&mut st, 2.0, &AuctionConfig::default()).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.allocations[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.allocations[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.unit_cost, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn seller_and_buyer_clear() {
        // Oracle: bisection on 2/(4 + p_s) = 4/(1 + p_b), p_b = −p_s.
        let (mut lo, mut hi) = (-3.0, 0.0);
        for _ in 0..200 {
            let ps = 0.5 * (lo + hi);
            // Seller's marginal above the buyer's: it is selling too much.
            if 2.0 / (4.0 + ps) > 4.0 / (1.0 - ps) {
                lo = ps;
            } else {
                hi = ps;
            }
        }
        let ps = 0.5 * (lo + hi);
        let c_star = 2.0 / (4.0 + ps);

        let agents = vec![Agent::new(0, log(2.0, 1.0), 3.0), Agent::new(1, log(4.0, 1.0), 0.0)];
        let mut st = AggregatorState::new(0, agents);
        let out = run_auction(&mut st, 0.0, &AuctionConfig::default()).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.unit_cost, c_star, epsilon = 1e-7);
        assert_relative_eq!(out.allocations[0], ps, epsilon = 1e-6);
        assert_relative_eq!(out.allocations[1], -ps, epsilon = 1e-6);
        assert_eq!(st.power_bidders(), vec![0]);
        assert_eq!(st.cost_bidders(), vec![1]);
    }

    #[test]
    fn verifier_cases() {
        let mut st = AggregatorState::new(0, vec![Agent::new(0, log(2.0, 1.0), 0.0)]);
        run_auction(&mut st, 1.0, &AuctionConfig::default()).unwrap();
        let rep = verify_equilibrium(&st, 1e-6);
        assert!(rep.passed && rep.max_residual < 1e-7);

        let mut bumped = st.clone();
        bumped.agents[0].power_bid += 1e-3;
        let rep = verify_equilibrium(&bumped, 1e-6);
        let expect = st.agents[0].utility.curvature(1.0).abs() * 1e-3;
        assert_relative_eq!(rep.max_residual, expect, max_relative = 1e-2);

        let mut idle = AggregatorState::new(0, vec![Agent::new(0, log(1.0, 1.0), 0.0)]);
        idle.unit_cost = 5.0;
        let rep = verify_equilibrium(&idle, 1e-6);
        assert!(rep.vacuous && rep.passed);
    }

    #[test]
    fn aggregator_utility_sums() {
        let mut st = AggregatorState::new(0, vec![Agent::new(0, log(2.0, 1.0), 0.0)]);
        assert_eq!(st.aggregator_utility().unwrap(), 0.0);
        st.agents[0].power_bid = 1.0;
        assert_relative_eq!(st.aggregator_utility().unwrap(), 2.0 * 2f64.ln());
        st.agents.push(Agent { power_bid: 0.5, ..Agent::new(1, log(1.0, 2.0), 0.5) });
        st.roles.push(Role::Cost);
        let sum = 2.0 * 2f64.ln() + 3f64.ln();
        assert_relative_eq!(st.aggregator_utility().unwrap(), sum, epsilon = 1e-12);
    }

    #[test]
    fn warm_start_is_cheap() {
        let agents: Vec<Agent> = (0..12)
            .map(|i| Agent::new(i, log(2.0 + 0.3 * i as f64, 0.5 + 0.1 * i as f64), if i % 3 == 0 { 2.0 } else { 0.0 }))
            .collect();
        let mut st = AggregatorState::new(0, agents);
        let cold = run_auction(&mut st, 20.0, &AuctionConfig::default()).unwrap();
        let warm = run_auction(&mut st, 20.2, &AuctionConfig::default()).unwrap();
        assert!(cold.converged && warm.converged);
        assert!(warm.iterations <= cold.iterations);
    }

    #[test]
    fn recovers_after_sitting_on_a_demand_jump() {
        // One sigmoid buyer: demand jumps from 0 to ~1.2 near c ≈ 2.6, so a
        // small allocation has no exact clearing cost.
        let agents = vec![Agent::new(0, Utility::Sigmoid { a: 8.0, b: 1.0 }, 0.0), Agent::new(1, log(2.0, 1.0), 0.5)];
        let mut st = AggregatorState::new(0, agents);
        let stuck = run_auction(&mut st, 0.05, &AuctionConfig::default()).unwrap();
        assert!(!stuck.converged);
        let next = run_auction(&mut st, 3.0, &AuctionConfig::default()).unwrap();
        assert!(next.converged);
        assert_relative_eq!(next.unit_cost, clearing_cost(&st.agents, 3.0), max_relative = 1e-6);
    }

    proptest! {
        #[test]
        fn demand_is_monotone(a in 0.5..12.0_f64, b in 0.3..3.0_f64, c1 in 0.05..5.0_f64, dc in 0.0..2.0_f64, sig in proptest::bool::ANY) {
            let u = if sig { Utility::Sigmoid { a, b } } else { Utility::Log { a, b } };
            prop_assert!(u.demand(c1 + dc) <= u.demand(c1) + 1e-12);
        }

        #[test]
        fn utilities_are_quasiconcave(a in 0.5..12.0_f64, b in 0.3..3.0_f64, x in 0.0..10.0_f64, y in 0.0..10.0_f64, sig in proptest::bool::ANY) {
            use nalgebra::DVector;
            let u = if sig { Utility::Sigmoid { a, b } } else { Utility::Log { a, b } };
            let ok = crate::vecopt::quasiconcavity_probe(
                |v: &DVector<f64>| u.value(v[0]).unwrap(),
                &DVector::from_element(1, x),
                &DVector::from_element(1, y),
                101,
            ).unwrap();
            prop_assert!(ok);
        }
    }
}
