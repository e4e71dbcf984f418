//! Radial feeder model and its linear operating constraints.
//!
//! Voltages use the LinDistFlow approximation: with active injections `p` at
//! the aggregator nodes, the squared voltage at node `n` is
//! `v_n² ≈ v₀² − Σ_k C_V[n][k]·p_k`, where `C_V[n][k] = 2·Σ r_ℓ / base` over the
//! lines shared by the substation→n and substation→k paths. Line loading is
//! the sum of downstream injections.
//!
//! The assembled system, in `Aᵀp + a ≤ 0` / `Bᵀp + b = 0` form, is
//!
//! ```text
//! −C_V p + c_V_lo ≤ 0      (upper voltage limit, c_V_lo = v₀² − v_max²)
//!  C_V p + c_V_hi ≤ 0      (lower voltage limit, c_V_hi = v_min² − v₀²)
//!  C_S p + c_S0   ≤ 0      (line capacity, c_S0 = −capacity)
//!  c_P0ᵀp + c_P00 − P0 = 0 (energy balance)
//! −cᵀp + c0·P0   ≤ 0      (DSO budget)
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecopt::LinearFeasibleRegion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    /// Position in the aggregator vector, if an aggregator sits here.
    pub aggregator: Option<usize>,
    /// `G_k`, zero when not yet assigned.
    #[serde(default)]
    pub agent_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    /// Resistance, p.u.
    pub r: f64,
    /// Reactance, p.u.
    pub x: f64,
    /// Capacity in the same energy unit as the allocations.
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
    pub substation: u32,
    pub v0: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Allocation units per p.u. of power.
    pub base_power: f64,
}

impl NetworkModel {
    pub fn n_aggregators(&self) -> usize {
        self.nodes.iter().filter(|n| n.aggregator.is_some()).count()
    }

    /// Aggregator node ids in aggregator order.
    pub fn aggregator_nodes(&self) -> Vec<u32> {
        let mut v: Vec<(usize, u32)> = self.nodes.iter().filter_map(|n| n.aggregator.map(|k| (k, n.id))).collect();
        v.sort();
        v.into_iter().map(|(_, id)| id).collect()
    }

    pub fn agent_counts(&self) -> Vec<usize> {
        let mut v: Vec<(usize, usize)> =
            self.nodes.iter().filter_map(|n| n.aggregator.map(|k| (k, n.agent_count))).collect();
        v.sort();
        v.into_iter().map(|(_, g)| g).collect()
    }

    pub fn set_agent_counts(&mut self, counts: &[usize]) -> Result<()> {
        if counts.len() != self.n_aggregators() {
            return Err(Error::Dimension(format!(
                "{} agent counts for {} aggregators",
                counts.len(),
                self.n_aggregators()
            )));
        }
        for n in &mut self.nodes {
            if let Some(k) = n.aggregator {
                n.agent_count = counts[k];
            }
        }
        Ok(())
    }

    /// Checks the feeder is a tree rooted at the substation and returns, for
    /// every node id, the indices of the lines on its path to the substation.
    pub fn paths(&self) -> Result<HashMap<u32, Vec<usize>>> {
        let ids: HashMap<u32, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::Model("duplicate node ids".into()));
        }
        if !ids.contains_key(&self.substation) {
            return Err(Error::Model(format!("substation {} is not a node", self.substation)));
        }
        if self.lines.len() + 1 != self.nodes.len() {
            return Err(Error::Model(format!(
                "a radial feeder on {} nodes has {} lines, found {}",
                self.nodes.len(),
                self.nodes.len() - 1,
                self.lines.len()
            )));
        }
        let mut adj: HashMap<u32, Vec<(u32, usize)>> = HashMap::new();
        for (li, l) in self.lines.iter().enumerate() {
            for id in [l.from, l.to] {
                if !ids.contains_key(&id) {
                    return Err(Error::Model(format!("line {li} references unknown node {id}")));
                }
            }
            if !(l.r >= 0.0 && l.x >= 0.0 && l.capacity > 0.0) {
                return Err(Error::Model(format!("line {li} has invalid parameters")));
            }
            adj.entry(l.from).or_default().push((l.to, li));
            adj.entry(l.to).or_default().push((l.from, li));
        }
        let mut paths: HashMap<u32, Vec<usize>> = HashMap::new();
        paths.insert(self.substation, Vec::new());
        let mut queue = VecDeque::from([self.substation]);
        while let Some(u) = queue.pop_front() {
            let base = paths[&u].clone();
            for &(v, li) in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                if paths.contains_key(&v) {
                    continue;
                }
                let mut p = base.clone();
                p.push(li);
                paths.insert(v, p);
                queue.push_back(v);
            }
        }
        if paths.len() != self.nodes.len() {
            return Err(Error::Model("feeder is not connected".into()));
        }
        Ok(paths)
    }

    pub fn validate(&self) -> Result<()> {
        self.paths()?;
        let mut ks: Vec<usize> = self.nodes.iter().filter_map(|n| n.aggregator).collect();
        ks.sort_unstable();
        if ks.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Model("aggregator indices must be 0..A without gaps".into()));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v0 && self.v0 < self.v_max && self.base_power > 0.0) {
            return Err(Error::Model("need 0 < v_min < v0 < v_max and base_power > 0".into()));
        }
        Ok(())
    }

    /// Number of lines between the substation and each aggregator.
    pub fn electrical_depth(&self) -> Result<Vec<usize>> {
        let paths = self.paths()?;
        Ok(self.aggregator_nodes().iter().map(|id| paths[id].len()).collect())
    }
}

/// Coefficient blocks of the operating constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConstraints {
    pub c_v: DMatrix<f64>,
    pub c_v_lo: DVector<f64>,
    pub c_v_hi: DVector<f64>,
    pub c_s: DMatrix<f64>,
    pub c_s0: DVector<f64>,
    pub c_p0: DVector<f64>,
    pub c_p00: f64,
    pub p0: f64,
    pub c0: f64,
}

/// Options for [`build_constraints`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Linear loss slope: each unit delivered to `k` costs
    /// `1 + loss_slope·Σ_path r` at the substation.
    pub loss_slope: f64,
}

impl GridConstraints {
    pub fn n_aggregators(&self) -> usize {
        self.c_p0.len()
    }

    /// Inequality rows, budget row included.
    pub fn n_ineq(&self) -> usize {
        2 * self.c_v.nrows() + self.c_s.nrows() + 1
    }

    fn check(&self) -> Result<()> {
        let a = self.c_p0.len();
        let checks = [
            ("C_V", self.c_v.ncols() == a),
            ("c_V_lo", self.c_v_lo.len() == self.c_v.nrows()),
            ("c_V_hi", self.c_v_hi.len() == self.c_v.nrows()),
            ("C_S", self.c_s.ncols() == a),
            ("c_S0", self.c_s0.len() == self.c_s.nrows()),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Dimension(format!("block {name} does not match {a} aggregators")));
            }
        }
        Ok(())
    }

    /// The `(A, a, B, b)` system for unit costs `c` (needed by the budget row).
    pub fn region(&self, c: &DVector<f64>) -> Result<LinearFeasibleRegion> {
        self.check()?;
        let a = self.n_aggregators();
        if c.len() != a {
            return Err(Error::Dimension(format!("{} unit costs for {a} aggregators", c.len())));
        }
        let nv = self.c_v.nrows();
        let ns = self.c_s.nrows();
        let p = 2 * nv + ns + 1;
        let mut am = DMatrix::zeros(a, p);
        let mut off = DVector::zeros(p);
        for r in 0..nv {
            for k in 0..a {
                am[(k, r)] = -self.c_v[(r, k)];
                am[(k, nv + r)] = self.c_v[(r, k)];
            }
            off[r] = self.c_v_lo[r];
            off[nv + r] = self.c_v_hi[r];
        }
        for r in 0..ns {
            for k in 0..a {
                am[(k, 2 * nv + r)] = self.c_s[(r, k)];
            }
            off[2 * nv + r] = self.c_s0[r];
        }
        for k in 0..a {
            am[(k, p - 1)] = -c[k];
        }
        off[p - 1] = self.c0 * self.p0;
        let bm = DMatrix::from_column_slice(a, 1, self.c_p0.as_slice());
        let bo = DVector::from_element(1, self.c_p00 - self.p0);
        LinearFeasibleRegion::new(am, off, bm, bo)
    }

    /// Inverse of [`GridConstraints::region`] given the block sizes.
    pub fn from_region(
        region: &LinearFeasibleRegion,
        n_voltage: usize,
        n_lines: usize,
        p0: f64,
    ) -> Result<(Self, DVector<f64>)> {
        let a = region.dim();
        if region.n_ineq() != 2 * n_voltage + n_lines + 1 || region.n_eq() != 1 {
            return Err(Error::Dimension("region does not have the grid block layout".into()));
        }
        let am = &region.ineq_matrix;
        let c_v = DMatrix::from_fn(n_voltage, a, |r, k| am[(k, n_voltage + r)]);
        let c_s = DMatrix::from_fn(n_lines, a, |r, k| am[(k, 2 * n_voltage + r)]);
        let last = 2 * n_voltage + n_lines;
        let c = DVector::from_fn(a, |k, _| -am[(k, last)]);
        let gc = Self {
            c_v,
            c_v_lo: region.ineq_offset.rows(0, n_voltage).into_owned(),
            c_v_hi: region.ineq_offset.rows(n_voltage, n_voltage).into_owned(),
            c_s,
            c_s0: region.ineq_offset.rows(2 * n_voltage, n_lines).into_owned(),
            c_p0: region.eq_matrix.column(0).into_owned(),
            c_p00: region.eq_offset[0] + p0,
            p0,
            c0: region.ineq_offset[last] / p0,
        };
        Ok((gc, c))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Text form: `matrix NAME ROWS COLS` / `vector NAME LEN` headers followed
    /// by whitespace-separated values, row-major; `scalar NAME VALUE` lines.
    /// Blank lines and `#` comments are ignored. Values round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# fairgrid grid constraints\n");
        let mat = |s: &mut String, name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(s, "matrix {name} {} {}", m.nrows(), m.ncols());
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        let vec = |s: &mut String, name: &str, v: &DVector<f64>| {
            let _ = writeln!(s, "vector {name} {}", v.len());
            let row: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        };
        mat(&mut s, "C_V", &self.c_v);
        vec(&mut s, "c_V_lo", &self.c_v_lo);
        vec(&mut s, "c_V_hi", &self.c_v_hi);
        mat(&mut s, "C_S", &self.c_s);
        vec(&mut s, "c_S0", &self.c_s0);
        vec(&mut s, "c_P0", &self.c_p0);
        let _ = writeln!(s, "scalar c_P00 {:?}", self.c_p00);
        let _ = writeln!(s, "scalar P0 {:?}", self.p0);
        let _ = writeln!(s, "scalar c0 {:?}", self.c0);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mats: HashMap<String, DMatrix<f64>> = HashMap::new();
        let mut vecs: HashMap<String, DVector<f64>> = HashMap::new();
        let mut scalars: HashMap<String, f64> = HashMap::new();

        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let mut i = 0;
        let num = |line: usize, tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("not a number: {tok:?}") })
        };
        let size = |line: usize, tok: Option<&str>, what: &str| -> Result<usize> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse { line, msg: format!("missing or bad {what}") })
        };
        while i < lines.len() {
            let (ln, header) = lines[i];
            let mut tok = header.split_whitespace();
            let kind = tok.next().unwrap_or("");
            let name =
                tok.next().ok_or_else(|| Error::Parse { line: ln, msg: "block without a name".into() })?.to_string();
            match kind {
                "scalar" => {
                    let v = tok
                        .next()
                        .ok_or_else(|| Error::Parse { line: ln, msg: format!("scalar {name} has no value") })?;
                    scalars.insert(name, num(ln, v)?);
                    i += 1;
                }
                "vector" | "matrix" => {
                    let (rows, cols) = if kind == "vector" {
                        (size(ln, tok.next(), "length")?, 1)
                    } else {
                        (size(ln, tok.next(), "row count")?, size(ln, tok.next(), "column count")?)
                    };
                    let mut vals = Vec::with_capacity(rows * cols);
                    i += 1;
                    while vals.len() < rows * cols {
                        let Some(&(l2, body)) = lines.get(i) else {
                            return Err(Error::Parse {
                                line: ln,
                                msg: format!("block {name}: expected {} values, found {}", rows * cols, vals.len()),
                            });
                        };
                        if body.starts_with("matrix") || body.starts_with("vector") || body.starts_with("scalar") {
                            return Err(Error::Parse {
                                line: l2,
                                msg: format!("block {name}: expected {} values, found {}", rows * cols, vals.len()),
                            });
                        }
                        for t in body.split_whitespace() {
                            vals.push(num(l2, t)?);
                        }
                        i += 1;
                    }
                    if vals.len() != rows * cols {
                        return Err(Error::Parse {
                            line: ln,
                            msg: format!("block {name}: expected {} values, found {}", rows * cols, vals.len()),
                        });
                    }
                    if kind == "vector" {
                        vecs.insert(name, DVector::from_vec(vals));
                    } else {
                        mats.insert(name, DMatrix::from_row_slice(rows, cols, &vals));
                    }
                }
                other => return Err(Error::Parse { line: ln, msg: format!("unknown block kind {other:?}") }),
            }
        }
        let take_m = |m: &mut HashMap<String, DMatrix<f64>>, k: &str| {
            m.remove(k).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing block {k}") })
        };
        let take_v = |m: &mut HashMap<String, DVector<f64>>, k: &str| {
            m.remove(k).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing block {k}") })
        };
        let take_s = |m: &HashMap<String, f64>, k: &str| {
            m.get(k).copied().ok_or_else(|| Error::Parse { line: 0, msg: format!("missing scalar {k}") })
        };
        let gc = Self {
            c_v: take_m(&mut mats, "C_V")?,
            c_v_lo: take_v(&mut vecs, "c_V_lo")?,
            c_v_hi: take_v(&mut vecs, "c_V_hi")?,
            c_s: take_m(&mut mats, "C_S")?,
            c_s0: take_v(&mut vecs, "c_S0")?,
            c_p0: take_v(&mut vecs, "c_P0")?,
            c_p00: take_s(&scalars, "c_P00")?,
            p0: take_s(&scalars, "P0")?,
            c0: take_s(&scalars, "c0")?,
        };
        gc.check()?;
        Ok(gc)
    }
}

/// LinDistFlow coefficient blocks for `network` with total energy `p0` and
/// DSO unit cost `c0`.
pub fn build_constraints(network: &NetworkModel, p0: f64, c0: f64, opts: BuildOptions) -> Result<GridConstraints> {
    network.validate()?;
    let paths = network.paths()?;
    let agg = network.aggregator_nodes();
    let a = agg.len();
    let n = network.nodes.len();
    let v0sq = network.v0 * network.v0;

    let mut c_v = DMatrix::zeros(n, a);
    for (row, node) in network.nodes.iter().enumerate() {
        let pn = &paths[&node.id];
        for (k, id) in agg.iter().enumerate() {
            let pk = &paths[id];
            let shared: f64 = pn.iter().filter(|l| pk.contains(l)).map(|&l| network.lines[l].r).sum();
            c_v[(row, k)] = 2.0 * shared / network.base_power;
        }
    }
    let c_v_lo = DVector::from_element(n, v0sq - network.v_max * network.v_max);
    let c_v_hi = DVector::from_element(n, network.v_min * network.v_min - v0sq);

    let nl = network.lines.len();
    let mut c_s = DMatrix::zeros(nl, a);
    for (k, id) in agg.iter().enumerate() {
        for &l in &paths[id] {
            c_s[(l, k)] = 1.0;
        }
    }
    let c_s0 = DVector::from_iterator(nl, network.lines.iter().map(|l| -l.capacity));
    let c_p0 = DVector::from_iterator(
        a,
        agg.iter().map(|id| 1.0 + opts.loss_slope * paths[id].iter().map(|&l| network.lines[l].r).sum::<f64>()),
    );
    Ok(GridConstraints { c_v, c_v_lo, c_v_hi, c_s, c_s0, c_p0, c_p00: 0.0, p0, c0 })
}

/// Edges of the bundled 37-node feeder (substation 799).
pub const IEEE37_EDGES: [(u32, u32); 36] = [
    (799, 701),
    (701, 702),
    (702, 705),
    (702, 713),
    (702, 703),
    (703, 727),
    (703, 730),
    (704, 714),
    (704, 720),
    (705, 742),
    (705, 712),
    (706, 725),
    (707, 724),
    (707, 722),
    (708, 733),
    (708, 732),
    (709, 731),
    (709, 708),
    (710, 735),
    (710, 736),
    (711, 741),
    (711, 740),
    (713, 704),
    (714, 718),
    (720, 707),
    (720, 706),
    (727, 744),
    (730, 709),
    (733, 734),
    (734, 737),
    (734, 710),
    (737, 738),
    (738, 711),
    (744, 728),
    (744, 729),
    (709, 775),
];

/// Aggregator nodes A1..A17 of the bundled feeder.
pub const IEEE37_AGGREGATORS: [u32; 17] =
    [701, 713, 741, 742, 712, 727, 718, 744, 702, 703, 731, 740, 724, 722, 725, 736, 735];

/// Uniform line data for the bundled feeder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeederParams {
    pub r: f64,
    pub x: f64,
    pub capacity: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub base_power: f64,
}

impl Default for FeederParams {
    fn default() -> Self {
        Self { r: 0.02, x: 0.01, capacity: 2000.0, v_min: 0.95, v_max: 1.05, base_power: 1000.0 }
    }
}

/// The bundled 37-node radial feeder with 17 aggregators; agent counts are
/// left at zero for the scenario to fill in.
pub fn ieee37_topology(params: &FeederParams) -> NetworkModel {
    let mut ids: Vec<u32> = IEEE37_EDGES.iter().flat_map(|&(a, b)| [a, b]).collect();
    ids.sort_unstable();
    ids.dedup();
    let nodes = ids
        .into_iter()
        .map(|id| Node { id, aggregator: IEEE37_AGGREGATORS.iter().position(|&n| n == id), agent_count: 0 })
        .collect();
    let lines = IEEE37_EDGES
        .iter()
        .map(|&(from, to)| Line { from, to, r: params.r, x: params.x, capacity: params.capacity })
        .collect();
    NetworkModel {
        nodes,
        lines,
        substation: 799,
        v0: 1.0,
        v_min: params.v_min,
        v_max: params.v_max,
        base_power: params.base_power,
    }
}

/// Topology text form:
///
/// ```text
/// substation 799
/// voltage 1.0 0.95 1.05      # v0 v_min v_max
/// base_power 1000
/// node 701 aggregator 0 25   # id, aggregator index, agent count
/// node 775
/// line 709 775 0.02 0.01 2000  # from to r x capacity
/// ```
pub fn parse_topology(text: &str) -> Result<NetworkModel> {
    let mut net = NetworkModel {
        nodes: Vec::new(),
        lines: Vec::new(),
        substation: 0,
        v0: 1.0,
        v_min: 0.95,
        v_max: 1.05,
        base_power: 1.0,
    };
    let mut have_sub = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let t: Vec<&str> = body.split_whitespace().collect();
        let f = |j: usize| -> Result<f64> {
            t.get(j).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("field {j} of {:?} is missing or not a number", t[0]),
            })
        };
        let u = |j: usize| -> Result<u32> {
            t.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { line, msg: format!("field {j} of {:?} is missing or not an id", t[0]) })
        };
        match t[0] {
            "substation" => {
                net.substation = u(1)?;
                have_sub = true;
            }
            "voltage" => {
                net.v0 = f(1)?;
                net.v_min = f(2)?;
                net.v_max = f(3)?;
            }
            "base_power" => net.base_power = f(1)?,
            "node" => {
                let id = u(1)?;
                let (aggregator, agent_count) = match t.get(2) {
                    Some(&"aggregator") => {
                        (Some(u(3)? as usize), t.get(4).map(|_| u(4)).transpose()?.unwrap_or(0) as usize)
                    }
                    None => (None, 0),
                    Some(other) => {
                        return Err(Error::Parse { line, msg: format!("unexpected {other:?} after node id") })
                    }
                };
                net.nodes.push(Node { id, aggregator, agent_count });
            }
            "line" => net.lines.push(Line { from: u(1)?, to: u(2)?, r: f(3)?, x: f(4)?, capacity: f(5)? }),
            other => return Err(Error::Parse { line, msg: format!("unknown record {other:?}") }),
        }
    }
    if !have_sub {
        return Err(Error::Parse { line: 0, msg: "missing substation record".into() });
    }
    net.validate()?;
    Ok(net)
}

pub fn topology_to_text(net: &NetworkModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "substation {}", net.substation);
    let _ = writeln!(s, "voltage {:?} {:?} {:?}", net.v0, net.v_min, net.v_max);
    let _ = writeln!(s, "base_power {:?}", net.base_power);
    for n in &net.nodes {
        match n.aggregator {
            Some(k) => {
                let _ = writeln!(s, "node {} aggregator {k} {}", n.id, n.agent_count);
            }
            None => {
                let _ = writeln!(s, "node {}", n.id);
            }
        }
    }
    for l in &net.lines {
        let _ = writeln!(s, "line {} {} {:?} {:?} {:?}", l.from, l.to, l.r, l.x, l.capacity);
    }
    s
}
