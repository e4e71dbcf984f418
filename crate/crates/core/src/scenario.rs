//! Experiment definitions: feeder, constraint source, agent population and
//! solver settings, stored as TOML.
//!
//! A scenario either lists its agents explicitly or leaves them to be drawn
//! from `agents` with `seed`; [`Scenario::materialize`] does the drawing, so a
//! generated file pins the population regardless of later changes to the
//! generator.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    build_constraints, ieee37_topology, parse_topology, BuildOptions, FeederParams, GridConstraints, NetworkModel,
};
use crate::market::{Agent, AggregatorState, AuctionConfig, Utility};
use crate::mgda::{ActiveSetOptions, DirectionRule, PrimalStep, StepSchedule, ToleranceSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySource {
    Ieee37 {
        #[serde(default)]
        feeder: FeederParams,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSource {
    Build {
        #[serde(default)]
        loss_slope: f64,
    },
    /// Coefficients read verbatim; `P0` and `c0` come from the file.
    File { path: PathBuf },
}

/// Ranges the agent population is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSpec {
    pub count_min: usize,
    pub count_max: usize,
    /// 1-based aggregator labels drawn from the upper half of the count range.
    pub boosted: Vec<usize>,
    /// Probability that an agent has log utility (the rest are sigmoid).
    pub log_share: f64,
    pub log_a: [f64; 2],
    pub log_b: [f64; 2],
    pub sigmoid_a: [f64; 2],
    pub sigmoid_b: [f64; 2],
    /// Probability that an agent owns PV.
    pub pv_share: f64,
    pub pv_g: [f64; 2],
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            count_min: 9,
            count_max: 25,
            boosted: vec![4, 6, 10, 12],
            log_share: 0.8,
            log_a: [2.0, 6.0],
            log_b: [0.5, 2.0],
            sigmoid_a: [6.0, 12.0],
            sigmoid_b: [0.5, 2.0],
            pv_share: 0.3,
            pv_g: [0.5, 3.0],
        }
    }
}

/// One agent as written in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub utility: Utility,
    #[serde(default)]
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorPopulation {
    pub agents: Vec<AgentRecord>,
}

/// Solver knobs with their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_outer: usize,
    pub tolerances: ToleranceSet,
    pub rule: DirectionRule,
    /// Base primal step `η₀` (energy units per unit of normalised gradient).
    pub eta0: f64,
    /// Lower clamp on `1 + cos` in the adaptive step.
    pub eta_floor: f64,
    /// Dual steps `dual_scale/‖row‖` for the literal rule.
    pub dual_scale: f64,
    pub nu_max: f64,
    pub active_set: ActiveSetOptions,
    pub restore_sweeps: usize,
    pub restore_tol: f64,
    /// Step multiplier on direction reversals (1 disables).
    pub backoff: f64,
    pub auction: AuctionConfig,
    /// Initial allocation per aggregator as a fraction of `P0/A`.
    pub init_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer: 3000,
            tolerances: ToleranceSet::default(),
            rule: DirectionRule::Projected,
            eta0: 2.0,
            eta_floor: 0.25,
            dual_scale: 0.1,
            nu_max: 1.0,
            active_set: ActiveSetOptions::default(),
            restore_sweeps: 2000,
            restore_tol: 1e-10,
            backoff: 0.5,
            auction: AuctionConfig::default(),
            init_fraction: 1e-3,
        }
    }
}

impl SolverSettings {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            rule: self.rule,
            primal: PrimalStep::Adaptive { eta0: self.eta0, floor: self.eta_floor },
            dual_scale: self.dual_scale,
            nu_max: self.nu_max,
            restore_sweeps: self.restore_sweeps,
            restore_tol: self.restore_tol,
            active_set: self.active_set,
            backoff: self.backoff,
        }
    }
}

/// Every field has a default, so a file only needs what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub seed: u64,
    /// Total energy the DSO buys.
    pub p0: f64,
    /// Wholesale unit cost paid by the DSO.
    pub c0: f64,
    pub topology: TopologySource,
    pub constraints: ConstraintSource,
    #[serde(default)]
    pub agents: AgentSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Explicit population, one entry per aggregator in aggregator order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub population: Vec<AggregatorPopulation>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 7,
            p0: 700.0,
            c0: 0.3,
            topology: TopologySource::Ieee37 { feeder: FeederParams::default() },
            constraints: ConstraintSource::Build { loss_slope: 0.0 },
            agents: AgentSpec::default(),
            solver: SolverSettings::default(),
            population: Vec::new(),
        }
    }
}

/// Everything a run needs, resolved from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Instance {
    pub network: NetworkModel,
    pub constraints: GridConstraints,
    pub aggregators: Vec<AggregatorState>,
}

impl Instance {
    pub fn agent_counts(&self) -> Vec<usize> {
        self.aggregators.iter().map(|a| a.agent_count()).collect()
    }
}

impl Scenario {
    /// The bundled 37-bus scenario with seed `seed`.
    pub fn bundled(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |sp| text[..sp.start].lines().count().max(1));
            Error::Parse { line, msg: e.message().to_string() }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Model(format!("cannot serialise scenario: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // Relative paths inside the file are relative to the file.
        if let Some(dir) = path.parent() {
            for p in s.paths_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = Vec::new();
        if let TopologySource::File { path } = &mut self.topology {
            v.push(path);
        }
        if let ConstraintSource::File { path } = &mut self.constraints {
            v.push(path);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Usage(format!("{field}: {why}")));
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return bad("p0", "must be positive");
        }
        if !(self.c0 >= 0.0 && self.c0.is_finite()) {
            return bad("c0", "must be non-negative");
        }
        let a = &self.agents;
        if a.count_min == 0 || a.count_min > a.count_max {
            return bad("agents.count_min", "need 1 ≤ count_min ≤ count_max");
        }
        for (name, r) in
            [("log_a", a.log_a), ("log_b", a.log_b), ("sigmoid_a", a.sigmoid_a), ("sigmoid_b", a.sigmoid_b)]
        {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(&format!("agents.{name}"), "need 0 < low ≤ high");
            }
        }
        if !(a.pv_g[0] >= 0.0 && a.pv_g[0] <= a.pv_g[1]) {
            return bad("agents.pv_g", "need 0 ≤ low ≤ high");
        }
        for (name, p) in [("log_share", a.log_share), ("pv_share", a.pv_share)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("agents.{name}"), "must be a probability");
            }
        }
        let s = &self.solver;
        if s.max_outer == 0 {
            return bad("solver.max_outer", "must be at least 1");
        }
        if !(s.eta0 > 0.0) {
            return bad("solver.eta0", "must be positive");
        }
        if !(s.nu_max > 0.0 && s.nu_max <= 1.0) {
            return bad("solver.nu_max", "must lie in (0, 1]");
        }
        if !(s.backoff > 0.0 && s.backoff <= 1.0) {
            return bad("solver.backoff", "must lie in (0, 1]");
        }
        if !(s.init_fraction > 0.0) {
            return bad("solver.init_fraction", "must be positive");
        }
        if !(s.eta_floor >= 0.0) {
            return bad("solver.eta_floor", "must be non-negative");
        }
        let t = &s.tolerances;
        if !(t.feasibility > 0.0 && t.feasibility.is_finite()) {
            return bad("solver.tolerances.feasibility", "must be positive");
        }
        if !(t.stationarity_abs >= 0.0 && t.stationarity_rel >= 0.0 && t.stationarity_abs + t.stationarity_rel > 0.0) {
            return bad(
                "solver.tolerances.stationarity_rel",
                "stationarity tolerances must be non-negative, not both zero",
            );
        }
        for (k, pop) in self.population.iter().enumerate() {
            if pop.agents.is_empty() {
                return bad(&format!("population[{k}]"), "aggregator without agents");
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkModel> {
        match &self.topology {
            TopologySource::Ieee37 { feeder } => Ok(ieee37_topology(feeder)),
            TopologySource::File { path } => parse_topology(&std::fs::read_to_string(path)?),
        }
    }

    /// Draws the agent population for every aggregator of `network`.
    pub fn draw_population(&self, n_aggregators: usize) -> Vec<AggregatorPopulation> {
        let spec = &self.agents;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mid = (spec.count_min + spec.count_max).div_ceil(2);
        let counts: Vec<usize> = (0..n_aggregators)
            .map(|k| {
                let lo = if spec.boosted.contains(&(k + 1)) { mid } else { spec.count_min };
                rng.gen_range(lo..=spec.count_max)
            })
            .collect();
        let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
        counts
            .iter()
            .map(|&g| AggregatorPopulation {
                agents: (0..g)
                    .map(|_| {
                        let utility = if rng.gen_bool(spec.log_share) {
                            Utility::Log { a: draw(&mut rng, spec.log_a), b: draw(&mut rng, spec.log_b) }
                        } else {
                            Utility::Sigmoid { a: draw(&mut rng, spec.sigmoid_a), b: draw(&mut rng, spec.sigmoid_b) }
                        };
                        let g = if rng.gen_bool(spec.pv_share) { draw(&mut rng, spec.pv_g) } else { 0.0 };
                        AgentRecord { utility, g }
                    })
                    .collect(),
            })
            .collect()
    }

    /// A copy with the population drawn and written out explicitly.
    pub fn materialize(&self) -> Result<Self> {
        let mut s = self.clone();
        if s.population.is_empty() {
            let n = self.network()?.n_aggregators();
            s.population = self.draw_population(n);
        }
        Ok(s)
    }

    pub fn instantiate(&self) -> Result<Instance> {
        self.validate()?;
        let mut network = self.network()?;
        let a = network.n_aggregators();
        let population = if self.population.is_empty() { self.draw_population(a) } else { self.population.clone() };
        if population.len() != a {
            return Err(Error::Usage(format!("population: {} aggregators listed, feeder has {a}", population.len())));
        }
        network.set_agent_counts(&population.iter().map(|p| p.agents.len()).collect::<Vec<_>>())?;
        let constraints = match &self.constraints {
            ConstraintSource::Build { loss_slope } => {
                build_constraints(&network, self.p0, self.c0, BuildOptions { loss_slope: *loss_slope })?
            }
            ConstraintSource::File { path } => {
                let gc = GridConstraints::load(path)?;
                if gc.n_aggregators() != a {
                    return Err(Error::Usage(format!(
                        "constraints: file has {} aggregators, feeder has {a}",
                        gc.n_aggregators()
                    )));
                }
                gc
            }
        };
        let aggregators = population
            .iter()
            .enumerate()
            .map(|(k, pop)| {
                let agents = pop.agents.iter().enumerate().map(|(i, r)| Agent::new(i, r.utility, r.g)).collect();
                AggregatorState::new(k, agents)
            })
            .collect();
        Ok(Instance { network, constraints, aggregators })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let s = Scenario::bundled(11).materialize().unwrap();
        let back = Scenario::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
        let bare = Scenario::bundled(3);
        assert_eq!(Scenario::from_toml(&bare.to_toml().unwrap()).unwrap(), bare);
    }

    #[test]
    fn counts_respect_ranges_and_boost() {
        for seed in 0..30 {
            let inst = Scenario::bundled(seed).instantiate().unwrap();
            let g = inst.agent_counts();
            assert_eq!(g.len(), 17);
            assert!(g.iter().all(|&n| (9..=25).contains(&n)));
            for k in [4, 6, 10, 12] {
                assert!(g[k - 1] >= 17, "seed {seed}: A{k} has {}", g[k - 1]);
            }
        }
    }

    #[test]
    fn same_seed_same_population() {
        let a = Scenario::bundled(5).materialize().unwrap();
        let b = Scenario::bundled(5).materialize().unwrap();
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        let c = Scenario::bundled(6).materialize().unwrap();
        assert_ne!(a.population, c.population);
    }

    #[test]
    fn short_files_fill_in_defaults() {
        let s = Scenario::from_toml("seed = 3\n[solver]\nrule = \"literal\"\n").unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.solver.rule, DirectionRule::Literal);
        assert_eq!(s.p0, Scenario::default().p0);
    }

    #[test]
    fn bad_fields_are_named() {
        let mut s = Scenario::bundled(1);
        s.solver.nu_max = 2.0;
        let err = Scenario::from_toml(&s.to_toml().unwrap()).unwrap_err().to_string();
        assert!(err.contains("solver.nu_max"), "{err}");
        let err = Scenario::from_toml("seed = 1\np0 = \"lots\"\n").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn file_sources_resolve_relative_to_the_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let base = Scenario::bundled(2);
        let net = base.network().unwrap();
        std::fs::write(dir.path().join("feeder.txt"), crate::grid::topology_to_text(&net)).unwrap();
        let inst = base.instantiate().unwrap();
        inst.constraints.save(dir.path().join("gc.txt")).unwrap();
        let s = Scenario {
            topology: TopologySource::File { path: "feeder.txt".into() },
            constraints: ConstraintSource::File { path: "gc.txt".into() },
            ..base
        };
        s.save(dir.path().join("s.toml")).unwrap();
        let loaded = Scenario::load(dir.path().join("s.toml")).unwrap().instantiate().unwrap();
        assert_eq!(loaded.constraints, inst.constraints);
        assert_eq!(loaded.agent_counts(), inst.agent_counts());
    }
}
