//! `fairgrid`: generate scenarios, run the allocation in either mode, compare
//! the two, or sweep Pareto-optimal points. All output is CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fairgrid::dso::{pareto_sweep, IterationTrace};
use fairgrid::{run_bilevel, BilevelOutcome, Error, Mode, Scenario, Status};

/// Exit status for runs that stopped at the iteration cap.
const NOT_CONVERGED: u8 = 3;
const USAGE: u8 = 2;
const FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "fairgrid", version, about = "Fair and efficient power allocation on a radial feeder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario file with a freshly drawn agent population.
    Gen {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Scenario file to write.
        #[arg(long, default_value = "scenario.toml")]
        out: PathBuf,
    },
    /// Run one mode; writes trace.csv and final_allocation.csv.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "tradeoff", value_parser = parse_mode)]
        mode: Mode,
    },
    /// Run both modes; writes compare.csv.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Tradeoff runs from spread starting points; writes pareto.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file; the bundled 37-bus scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed. A population listed in the file is kept.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Largest constraint violation accepted at termination.
    #[arg(long)]
    tol_feas: Option<f64>,
    /// Relative stationarity tolerance (scaled by the gradient norms).
    #[arg(long)]
    tol_stat: Option<f64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn scenario(&self) -> fairgrid::Result<Scenario> {
        let mut sc = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => Scenario::bundled(self.seed.unwrap_or(7)),
        };
        if let Some(seed) = self.seed {
            sc.seed = seed;
        }
        if let Some(n) = self.max_iter {
            sc.solver.max_outer = n;
        }
        if let Some(t) = self.tol_feas {
            sc.solver.tolerances.feasibility = t;
        }
        if let Some(t) = self.tol_stat {
            sc.solver.tolerances.stationarity_rel = t;
        }
        sc.validate()?;
        fs::create_dir_all(&self.out)?;
        Ok(sc)
    }
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    welfare: f64,
    fairness: f64,
    cosine: f64,
    min_norm: f64,
    nu: f64,
    max_ineq_gap: f64,
    eq_gap: f64,
}

#[derive(Serialize)]
struct AllocationRow {
    aggregator: usize,
    p_k: f64,
    c_k: f64,
    #[serde(rename = "G_k")]
    g_k: usize,
    p_k_per_agent: f64,
}

#[derive(Serialize)]
struct CompareRow {
    aggregator: usize,
    p_k: f64,
    c_k: f64,
    #[serde(rename = "p_k*")]
    p_fair: f64,
    #[serde(rename = "c_k*")]
    c_fair: f64,
}

#[derive(Serialize)]
struct ParetoRow {
    run: usize,
    welfare: f64,
    fairness: f64,
    iterations: usize,
    converged: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> fairgrid::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Model(format!("csv: {other:?}")),
    }
}

fn write_trace(path: &Path, trace: &IterationTrace) -> fairgrid::Result<()> {
    write_csv(
        path,
        trace.records.iter().map(|r| TraceRow {
            iter: r.iter,
            welfare: r.welfare,
            fairness: r.fairness,
            cosine: r.cosine,
            min_norm: r.min_norm,
            nu: r.nu,
            max_ineq_gap: r.max_ineq_gap,
            eq_gap: r.eq_gap,
        }),
    )
}

fn report(label: &str, out: &BilevelOutcome) {
    eprintln!(
        "{label}: {:?} after {} iterations, welfare {:.4}, Jain {:.5}",
        out.status,
        out.iterations(),
        out.welfare,
        out.fairness
    );
}

fn status_code(statuses: &[Status]) -> u8 {
    if statuses.iter().any(|s| matches!(s, Status::Diverged { .. })) {
        FAILURE
    } else if statuses.iter().all(|s| *s == Status::Converged) {
        0
    } else {
        NOT_CONVERGED
    }
}

fn cmd_gen(seed: u64, out: &Path) -> fairgrid::Result<u8> {
    Scenario::bundled(seed).materialize()?.save(out)?;
    Ok(0)
}

fn cmd_run(common: &Common, mode: Mode) -> fairgrid::Result<u8> {
    let sc = common.scenario()?;
    let mut inst = sc.instantiate()?;
    let out = run_bilevel(&mut inst, mode, &sc.solver, None)?;
    write_trace(&common.out.join("trace.csv"), &out.trace)?;
    let counts = inst.agent_counts();
    write_csv(
        &common.out.join("final_allocation.csv"),
        (0..counts.len()).map(|k| AllocationRow {
            aggregator: k + 1,
            p_k: out.state.p[k],
            c_k: out.costs[k],
            g_k: counts[k],
            p_k_per_agent: out.state.p[k] / counts[k] as f64,
        }),
    )?;
    report(&format!("{mode:?}"), &out);
    if let Err(e) = out.check() {
        eprintln!("error: {e}");
    }
    Ok(status_code(&[out.status]))
}

fn cmd_compare(common: &Common) -> fairgrid::Result<u8> {
    let sc = common.scenario()?;
    let mut base = sc.instantiate()?;
    let eff = run_bilevel(&mut base, Mode::EfficientOnly, &sc.solver, None)?;
    let mut fair_inst = sc.instantiate()?;
    let fair = run_bilevel(&mut fair_inst, Mode::Tradeoff, &sc.solver, None)?;
    write_csv(
        &common.out.join("compare.csv"),
        (0..eff.costs.len()).map(|k| CompareRow {
            aggregator: k + 1,
            p_k: eff.state.p[k],
            c_k: eff.costs[k],
            p_fair: fair.state.p[k],
            c_fair: fair.costs[k],
        }),
    )?;
    report("EfficientOnly", &eff);
    report("Tradeoff", &fair);
    Ok(status_code(&[eff.status, fair.status]))
}

fn cmd_sweep(common: &Common, runs: usize) -> fairgrid::Result<u8> {
    if runs < 2 {
        return Err(Error::Usage(format!("a sweep needs at least 2 runs, got {runs}")));
    }
    let sc = common.scenario()?;
    let points = pareto_sweep(&sc, runs, sc.seed, [0.05, 1.95])?;
    write_csv(
        &common.out.join("pareto.csv"),
        points.iter().map(|p| ParetoRow {
            run: p.run,
            welfare: p.welfare,
            fairness: p.fairness,
            iterations: p.iterations,
            converged: p.converged,
        }),
    )?;
    for p in points.iter().filter(|p| p.error.is_some()) {
        eprintln!("run {}: {}", p.run, p.error.as_deref().unwrap_or_default());
    }
    let done = points.iter().filter(|p| p.converged).count();
    eprintln!("sweep: {done}/{runs} runs converged");
    Ok(if points.iter().any(|p| p.error.is_some()) {
        FAILURE
    } else if done == runs {
        0
    } else {
        NOT_CONVERGED
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { seed, out } => cmd_gen(*seed, out),
        Command::Run { common, mode } => cmd_run(common, *mode),
        Command::Compare { common } => cmd_compare(common),
        Command::Sweep { common, runs } => cmd_sweep(common, *runs),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_) | Error::Parse { .. }) { USAGE } else { FAILURE })
        }
    }
}
