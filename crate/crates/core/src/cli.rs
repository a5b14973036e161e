//! `smpc` command-line front end: design checks, single solves, batch
//! simulation and the verification suite.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{EvalMode, Scenario};
use crate::disturbance::{coverage_check, estimate_lw, monotonicity_check, BoundContext};
use crate::error::{Error, Result};
use crate::ilf::{local_lipschitz_estimate, verify_contraction, verify_tightening};
use crate::linalg::Vector;
use crate::nlp::SolveStatus;
use crate::ocp::{terminal_check, OcpSolution, TerminalCheckSpec};
use crate::report::{write_atomic, CheckOutcome, SuiteReport};
use crate::simulator::{
    aggregate_stats, plot_description, run_closed_loop, simulate, trace_csv, tube_ordering_check,
    verify_candidate_feasibility, verify_chance_tightening, CandidateReport, SimulationRun,
};

/// Tolerance on the sampled contraction ratio.
pub const CONTRACTION_TOL: f64 = 1e-9;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "smpc", version, about = "Tube-based stochastic nonlinear MPC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sampled validation of the offline design.
    DesignCheck(Common),
    /// One OCP solve.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Initial state, comma separated (defaults to the configured one).
        #[arg(long, allow_hyphen_values = true)]
        state: Option<String>,
        #[arg(long)]
        waive_design_check: bool,
        /// Writes the bound NLP as text to this file.
        #[arg(long)]
        export_nlp: Option<PathBuf>,
    },
    /// Closed-loop Monte Carlo simulation.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        waive_design_check: bool,
    },
    /// Simulation followed by the closed-loop verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        waive_design_check: bool,
        /// How `u(t+1)` is resolved in the chance-tightening suite.
        #[arg(long)]
        eval_mode: Option<EvalMode>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::DesignCheck(c) => cmd_design_check(c),
        Command::Solve {
            common,
            state,
            waive_design_check,
            export_nlp,
        } => cmd_solve(common, state.as_deref(), *waive_design_check, export_nlp.as_deref()),
        Command::Simulate {
            common,
            waive_design_check,
        } => cmd_simulate(common, *waive_design_check),
        Command::Verify {
            common,
            waive_design_check,
            eval_mode,
        } => cmd_verify(common, *waive_design_check, *eval_mode),
    }
}

fn load(common: &Common) -> Result<Scenario> {
    let mut sc = Scenario::load(&common.config)?;
    if let Some(seed) = common.seed {
        sc.config.simulation.seed = seed;
        sc.config.checks.seed = seed;
    }
    Ok(sc)
}

fn out_dir(sc: &Scenario, common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(&sc.config.output.directory))
}

fn provenance(sc: &Scenario, seed: u64) -> String {
    format!("# config_hash = {}\n# seed = {seed}\n", sc.config_hash)
}

/// Sampled validation of every offline ingredient: contraction, coverage
/// and monotonicity of the tube bounds, the configured `L_w` table and
/// Lipschitz constants, constraint tightening and the terminal conditions.
pub fn design_check(sc: &Scenario, seed: u64) -> Result<SuiteReport> {
    let setup = &sc.setup;
    let ck = &sc.config.checks;
    let design = &setup.design;
    let domain = &sc.domain;
    let mut checks = Vec::new();
    checks.push(
        verify_contraction(design, &setup.model, domain, ck.contraction_samples, seed)?.outcome(CONTRACTION_TOL),
    );
    let ctx = BoundContext {
        tb: &setup.tb,
        dm: &setup.dm,
        model: &setup.model,
        design,
        domain,
    };
    for (i, &p) in setup.levels.iter().enumerate() {
        checks.push(coverage_check(&ctx, p, ck.coverage_instances, ck.coverage_samples, seed.wrapping_add(10 + i as u64))?);
    }
    let (in_p, in_c) = monotonicity_check(&ctx, &setup.levels, ck.monotonicity_samples, seed.wrapping_add(20))?;
    checks.push(in_p);
    checks.push(in_c);
    if !sc.lw_estimated {
        let sampled = estimate_lw(
            &setup.dm,
            &setup.model,
            design,
            domain,
            &setup.levels,
            ck.lw_samples,
            seed.wrapping_add(30),
            1.0,
        )?;
        for (p, raw) in sampled {
            checks.push(CheckOutcome::at_least(format!("lw[p={p}]"), ck.lw_samples, setup.tb.lw(p)?, raw));
        }
    }
    let maps = setup
        .constraints
        .hard
        .iter()
        .map(|h| (&h.name, &h.map))
        .chain(setup.constraints.chance.iter().map(|c| (&c.name, &c.map)));
    for (i, ((name, map), res)) in maps.zip(&sc.resolved).enumerate() {
        let salt = seed.wrapping_add(40 + 2 * i as u64);
        let est = local_lipschitz_estimate(map, design, domain, ck.lipschitz_samples, salt, 1.0)?;
        checks.push(CheckOutcome::at_least(format!("lipschitz[{name}]"), ck.lipschitz_samples, res.lipschitz, est.raw));
        checks.push(verify_tightening(name, map, res.tightening, design, domain, ck.tightening_samples, salt + 1)?);
    }
    checks.extend(terminal_check(
        setup,
        sc.constants.w_bar_min,
        TerminalCheckSpec {
            count: ck.terminal_samples,
            seed: seed.wrapping_add(90),
        },
    )?);
    Ok(SuiteReport::new(sc.config_hash.clone(), seed, checks))
}

fn print_report(title: &str, report: &SuiteReport) {
    println!("{title}:");
    for c in &report.checks {
        println!("  {}", c.line());
    }
    println!("{title}: {}", if report.passed { "PASS" } else { "FAIL" });
}

/// Runs the design check unless waived; `Some(code)` means stop.
fn gate(sc: &Scenario, waived: bool) -> Result<Option<i32>> {
    if waived {
        log::warn!("design check waived");
        return Ok(None);
    }
    let report = design_check(sc, sc.config.checks.seed)?;
    if report.passed {
        return Ok(None);
    }
    print_report("design check", &report);
    eprintln!("error: design check failed; rerun with --waive-design-check to proceed anyway");
    Ok(Some(EXIT_FAILURE))
}

fn cmd_design_check(common: &Common) -> Result<i32> {
    let sc = load(common)?;
    let seed = sc.config.checks.seed;
    let report = design_check(&sc, seed)?;
    let path = out_dir(&sc, common).join("design_check.toml");
    write_atomic(&path, report.to_toml().as_bytes())?;
    print_report("design check", &report);
    println!("report written to {}", path.display());
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
}

/// Parses `"v1,v2,…"`.
pub fn parse_state(text: &str, n: usize) -> Result<Vector> {
    let values = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Usage(format!("state entry `{t}`: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != n {
        return Err(Error::Usage(format!("state has {} entries, the model has {n} states", values.len())));
    }
    Ok(Vector::from_vec(values))
}

#[derive(Debug, Serialize)]
struct TubeRecord {
    level: f64,
    s: Vec<f64>,
    w: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SolveRecord {
    config_hash: String,
    seed: u64,
    state: Vec<f64>,
    status: String,
    value: f64,
    iterations: usize,
    kkt_residual: f64,
    violation: f64,
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    u_terminal: Vec<f64>,
    active: Vec<String>,
    tube: Vec<TubeRecord>,
}

/// Structured text report of one solve.
pub fn solve_report(sc: &Scenario, seed: u64, x0: &Vector, sol: &OcpSolution) -> String {
    let t = &sol.traj;
    let rec = SolveRecord {
        config_hash: sc.config_hash.clone(),
        seed,
        state: x0.iter().copied().collect(),
        status: sol.status.as_str().into(),
        value: sol.value,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        violation: sol.violation,
        x: t.x.iter().map(|v| v.iter().copied().collect()).collect(),
        u: t.u.iter().map(|v| v.iter().copied().collect()).collect(),
        u_terminal: t.u_terminal.iter().copied().collect(),
        active: sc
            .setup
            .active_constraints(t, 1e-6)
            .into_iter()
            .map(|(tag, v)| format!("{tag:?} ({v:.3e})"))
            .collect(),
        tube: sol
            .levels
            .iter()
            .zip(t.s.iter().zip(&t.w))
            .map(|(&level, (s, w))| TubeRecord {
                level,
                s: s.clone(),
                w: w.clone(),
            })
            .collect(),
    };
    toml::to_string_pretty(&rec).expect("solve report serializes")
}

fn cmd_solve(common: &Common, state: Option<&str>, waived: bool, export: Option<&Path>) -> Result<i32> {
    let sc = load(common)?;
    let seed = sc.seed();
    let x0 = match state {
        Some(s) => parse_state(s, sc.setup.model.n())?,
        None => sc.x0.clone(),
    };
    if let Some(code) = gate(&sc, waived)? {
        return Ok(code);
    }
    if let Some(path) = export {
        let text = provenance(&sc, seed) + &sc.setup.bind(&x0, None)?.export_text();
        write_atomic(path, text.as_bytes())?;
        println!("NLP written to {}", path.display());
    }
    let sol = sc.setup.solve(&x0, None, &sc.config.solver)?;
    let report = solve_report(&sc, seed, &x0, &sol);
    let path = out_dir(&sc, common).join("solve.toml");
    write_atomic(&path, report.as_bytes())?;
    print!("{report}");
    println!("report written to {}", path.display());
    Ok(if sol.status == SolveStatus::Solved { EXIT_OK } else { EXIT_FAILURE })
}

/// Writes traces, summary and plot description; returns the printed summary.
pub fn write_simulation(sc: &Scenario, runs: &[SimulationRun], dir: &Path) -> Result<String> {
    let seed = sc.seed();
    let mut files = Vec::new();
    for run in runs {
        let name = format!("trace_{:03}.csv", run.replication);
        write_atomic(&dir.join(&name), trace_csv(sc, run).as_bytes())?;
        files.push(name);
    }
    let stats = aggregate_stats(sc, runs)?;
    write_atomic(&dir.join("summary.toml"), stats.to_toml(sc, seed).as_bytes())?;
    if sc.config.output.plot {
        write_atomic(&dir.join("plot.toml"), plot_description(sc, seed, &files).as_bytes())?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "{} replications × {} steps", stats.replications, stats.steps / stats.replications);
    let j = &stats.joint;
    let _ = writeln!(
        text,
        "pooled chance-constraint satisfaction: {:.4} (95% CI [{:.4}, {:.4}], {} of {} steps)",
        j.rate, j.ci_low, j.ci_high, j.satisfied, j.total
    );
    for c in &stats.per_constraint {
        let _ = writeln!(text, "  {}: {:.4} (95% CI [{:.4}, {:.4}])", c.name, c.rate, c.ci_low, c.ci_high);
    }
    let _ = writeln!(text, "hard-constraint violations: {}", stats.hard_violations);
    let _ = writeln!(text, "fallback steps: {}", stats.fallbacks);
    let _ = writeln!(
        text,
        "solver iterations: mean {:.2}, max {}; wall time {:.1} s",
        stats.mean_iterations,
        stats.max_iterations,
        stats.wall_time.as_secs_f64()
    );
    Ok(text)
}

fn cmd_simulate(common: &Common, waived: bool) -> Result<i32> {
    let sc = load(common)?;
    if let Some(code) = gate(&sc, waived)? {
        return Ok(code);
    }
    let runs = simulate(&sc, sc.seed())?;
    let dir = out_dir(&sc, common);
    print!("{}", write_simulation(&sc, &runs, &dir)?);
    println!("outputs written to {}", dir.display());
    Ok(EXIT_OK)
}

/// Closed-loop verification: candidate feasibility, chance tightening, tube
/// ordering, hard constraints, reproducibility and tube coverage.
pub fn verify_suite(sc: &Scenario, runs: &[SimulationRun], mode: EvalMode) -> Result<SuiteReport> {
    let seed = sc.seed();
    let setup = &sc.setup;
    let sim = &sc.config.simulation;
    let mut checks = Vec::new();
    let cand = runs
        .iter()
        .map(|r| verify_candidate_feasibility(sc, r))
        .fold(CandidateReport::default(), |a, b| a.merge(b));
    checks.extend(cand.outcomes(setup.design.delta_loc, setup.terminal.is_none()));
    let (chance, _) = verify_chance_tightening(sc, runs, mode, sim.chance_instances, sim.chance_trials, seed)?;
    checks.extend(chance.into_iter().map(|mut c| {
        c.name = format!("{}[{}]", c.name, mode.as_str());
        c
    }));
    checks.push(tube_ordering_check(sc, runs));
    let steps: usize = runs.iter().map(SimulationRun::steps).sum();
    let hard_ok = runs.iter().flat_map(|r| &r.trace).filter(|r| r.hard_ok).count();
    checks.push(CheckOutcome::at_least("hard-constraints", steps, hard_ok as f64 / steps.max(1) as f64, 1.0));
    let first = &runs[0];
    let again = run_closed_loop(sc, first.replication, first.seed)?;
    let same = trace_csv(sc, first) == trace_csv(sc, &again);
    checks.push(CheckOutcome::at_least("reproducibility", 2, f64::from(u8::from(same)), 1.0));
    let ctx = BoundContext {
        tb: &setup.tb,
        dm: &setup.dm,
        model: &setup.model,
        design: &setup.design,
        domain: &sc.domain,
    };
    let ck = &sc.config.checks;
    for (i, &p) in setup.levels.iter().enumerate() {
        checks.push(coverage_check(&ctx, p, ck.coverage_instances, ck.coverage_samples, seed.wrapping_add(10 + i as u64))?);
    }
    Ok(SuiteReport::new(sc.config_hash.clone(), seed, checks))
}

fn cmd_verify(common: &Common, waived: bool, mode: Option<EvalMode>) -> Result<i32> {
    let mut sc = load(common)?;
    if let Some(m) = mode {
        sc.config.simulation.eval_mode = m;
    }
    if let Some(code) = gate(&sc, waived)? {
        return Ok(code);
    }
    let runs = simulate(&sc, sc.seed())?;
    let report = verify_suite(&sc, &runs, sc.config.simulation.eval_mode)?;
    let path = out_dir(&sc, common).join("verify.toml");
    write_atomic(&path, report.to_toml().as_bytes())?;
    print_report("verification", &report);
    println!("report written to {}", path.display());
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

    fn config(name: &str) -> String {
        format!("{CONFIGS}/{name}")
    }

    #[test]
    fn state_parsing() {
        assert_eq!(parse_state("-1.25, 0", 2).unwrap(), Vector::from_vec(vec![-1.25, 0.0]));
        assert!(matches!(parse_state("1", 2), Err(Error::Usage(_))));
        assert!(matches!(parse_state("a,b", 2), Err(Error::Usage(_))));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["smpc", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["smpc", "solve"]), EXIT_USAGE);
        assert_eq!(run(["smpc", "solve", "--config", "/nonexistent.toml"]), EXIT_USAGE);
    }

    #[test]
    fn solve_from_origin_and_from_initial_state() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let cfg = config("dcdc_benchmark.toml");
        let code = run(["smpc", "solve", "--config", &cfg, "--state", "0,0", "--waive-design-check", "--out", out]);
        assert_eq!(code, EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("solve.toml")).unwrap();
        let v: toml::Value = toml::from_str(&text).unwrap();
        assert!(v["value"].as_float().unwrap() < 1e-12);
        assert!(v["u"].as_array().unwrap().iter().all(|u| u[0].as_float().unwrap().abs() < 1e-6));
        assert!(text.contains("config_hash"));

        let sc = Scenario::load(Path::new(&cfg)).unwrap();
        let x0 = Vector::from_vec(vec![-1.25, 0.0]);
        let sol = sc.setup.solve(&x0, None, &sc.config.solver).unwrap();
        assert_eq!(sol.status, SolveStatus::Solved);
        let r = sc.setup.robust();
        for k in 0..sc.setup.horizon() {
            assert!(sol.traj.w[r][k] > 0.0);
            assert!(sol.traj.s[r][k + 1] > sol.traj.s[r][k]);
        }
    }

    #[test]
    fn failed_design_check_blocks_solve() {
        let dir = tempfile::tempdir().unwrap();
        let text = std::fs::read_to_string(config("toy_linear.toml")).unwrap();
        // A contraction rate the toy loop cannot meet.
        let broken = text.replace("rho = 0.93", "rho = 0.5");
        assert_ne!(broken, text);
        let path = dir.path().join("broken.toml");
        std::fs::write(&path, broken).unwrap();
        let p = path.to_str().unwrap();
        let out = dir.path().join("out");
        let out = out.to_str().unwrap();
        assert_eq!(run(["smpc", "solve", "--config", p, "--out", out]), EXIT_FAILURE);
        assert!(!dir.path().join("out/solve.toml").exists());
    }

    #[test]
    fn simulate_is_deterministic_and_rejects_zero_steps() {
        let dir = tempfile::tempdir().unwrap();
        let text = std::fs::read_to_string(config("toy_linear.toml")).unwrap();
        let short = text.replace("steps = 500", "steps = 40");
        assert_ne!(short, text);
        let path = dir.path().join("toy.toml");
        std::fs::write(&path, &short).unwrap();
        let p = path.to_str().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for d in [&a, &b] {
            assert_eq!(run(["smpc", "simulate", "--config", p, "--seed", "5", "--out", d.to_str().unwrap()]), EXIT_OK);
        }
        for f in ["trace_000.csv", "summary.toml", "plot.toml"] {
            let x = std::fs::read(a.join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
            assert!(String::from_utf8(x).unwrap().contains("seed = 5"), "{f}");
        }
        let zero = dir.path().join("zero.toml");
        std::fs::write(&zero, short.replace("steps = 40", "steps = 0")).unwrap();
        assert_eq!(run(["smpc", "simulate", "--config", zero.to_str().unwrap(), "--waive-design-check"]), EXIT_USAGE);
    }
}
