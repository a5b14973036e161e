//! Acceptance criteria: one PASS/FAIL line each; exits nonzero on any FAIL.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use smpc::cli::{design_check, CONTRACTION_TOL};
use smpc::config::{ConstraintConfig, RunConfig, Scenario};
use smpc::disturbance::{coverage_check, monotonicity_check, BoundContext};
use smpc::ilf::verify_contraction;
use smpc::linalg::{Matrix, Vector};
use smpc::nlp::SolveStatus;
use smpc::ocp::Tag;
use smpc::qp::{qp_kkt_residual, solve_qp, QpProblem, QpStatus};
use smpc::sampling::stream_rng;
use smpc::simulator::{aggregate_stats, run_closed_loop, simulate, trace_csv, verify_candidate_feasibility};

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&configs().join(name)).expect("preset loads")
}

fn bounds(sc: &Scenario) -> BoundContext<'_> {
    BoundContext {
        tb: &sc.setup.tb,
        dm: &sc.setup.dm,
        model: &sc.setup.model,
        design: &sc.setup.design,
        domain: &sc.domain,
    }
}

/// Criteria 1, 2 and 9 share the DC-DC benchmark runs.
fn closed_loop(dcdc: &Scenario) -> Vec<Verdict> {
    let sim = &dcdc.config.simulation;
    let start = Instant::now();
    let runs = simulate(dcdc, dcdc.seed()).expect("simulation runs");
    let elapsed = start.elapsed();
    let stats = aggregate_stats(dcdc, &runs).expect("stats");
    let j = &stats.joint;
    let c1 = Verdict {
        id: 1,
        name: "chance-constraint satisfaction",
        passed: sim.replications == 14
            && sim.steps == 1000
            && j.total == 14_000
            && j.rate >= 0.80
            && elapsed <= Duration::from_secs(15 * 60),
        detail: format!(
            "pooled rate {:.4} (95% CI [{:.4}, {:.4}]) over {} steps, {:.0} s",
            j.rate,
            j.ci_low,
            j.ci_high,
            j.total,
            elapsed.as_secs_f64()
        ),
    };
    let steps = runs.iter().flat_map(|r| &r.trace);
    let worst_u = steps.clone().map(|r| r.u.amax()).fold(0.0, f64::max);
    let c2 = Verdict {
        id: 2,
        name: "hard-constraint satisfaction",
        passed: steps.clone().all(|r| r.u.amax() <= 0.2) && stats.hard_violations == 0,
        detail: format!("max |u(t)| = {worst_u:.6} over {} steps", steps.count()),
    };
    let first = &runs[0];
    let again = run_closed_loop(dcdc, first.replication, first.seed).expect("rerun");
    let (a, b) = (trace_csv(dcdc, first), trace_csv(dcdc, &again));
    let c9 = Verdict {
        id: 9,
        name: "determinism",
        passed: a.as_bytes() == b.as_bytes(),
        detail: format!("replication 0 trace rerun: {} bytes, identical = {}", a.len(), a == b),
    };
    vec![c1, c2, c9]
}

fn recursive_feasibility() -> Verdict {
    let toy = load("toy_linear.toml");
    let design = design_check(&toy, toy.config.checks.seed).expect("design check");
    let run = run_closed_loop(&toy, 0, toy.seed()).expect("toy run");
    let rep = verify_candidate_feasibility(&toy, &run);
    Verdict {
        id: 3,
        name: "recursive feasibility",
        passed: toy.setup.terminal.is_some() && design.passed && rep.pairs >= 500 && rep.clean == rep.pairs && rep.rate() == 1.0,
        detail: format!(
            "design check {}, {} of {} candidates feasible ({} assumption-clean)",
            if design.passed { "passed" } else { "failed" },
            rep.feasible_clean,
            rep.pairs,
            rep.clean
        ),
    }
}

fn coverage(dcdc: &Scenario) -> Verdict {
    let ctx = bounds(dcdc);
    let mut lines = Vec::new();
    let mut passed = true;
    for p in [0.8, 1.0] {
        let o = coverage_check(&ctx, p, 50, 10_000, 41).expect("coverage");
        passed &= o.passed && (p < 1.0 || o.value == 1.0);
        lines.push(format!("p={p}: min {:.4} vs {:.4}", o.value, o.threshold));
    }
    Verdict {
        id: 4,
        name: "probabilistic tube coverage",
        passed,
        detail: lines.join("; "),
    }
}

fn monotonicity(dcdc: &Scenario) -> Verdict {
    let (in_p, in_c) = monotonicity_check(&bounds(dcdc), &[0.6, 0.8, 1.0], 10_000, 43).expect("monotonicity");
    Verdict {
        id: 5,
        name: "monotonicity",
        passed: in_p.passed && in_c.passed && in_p.value == 0.0 && in_c.value == 0.0,
        detail: format!("violations: in p {}, in c {} (n = 10000)", in_p.value, in_c.value),
    }
}

fn contraction(dcdc: &Scenario) -> Verdict {
    let s = &dcdc.setup;
    let rep = verify_contraction(&s.design, &s.model, &dcdc.domain, 10_000, 47).expect("contraction");
    Verdict {
        id: 6,
        name: "contraction",
        passed: rep.passed(CONTRACTION_TOL) && (s.design.rho - 0.82).abs() < 1e-12,
        detail: format!("max ratio {:.6} vs ρ² = {:.6} (n = {})", rep.max_ratio, rep.bound, rep.samples),
    }
}

/// Robust-only preset against the same problem posed with the chance
/// constraints as hard constraints. The power bound is lowered from 2 to 0.5
/// so that the tightened power constraints become active.
fn rmpc_reduction() -> Verdict {
    let preset = std::fs::read_to_string(configs().join("dcdc_robust_only.toml")).unwrap();
    let text = preset.replace("offset = -2.0", "offset = -0.5");
    assert_ne!(text, preset);
    let robust_sc = Scenario::from_toml_str(&text).unwrap();
    let mut robust_cfg = RunConfig::from_toml_str(&text).unwrap();
    for c in robust_cfg.constraints.chance.iter_mut() {
        let r = robust_sc.resolved.iter().find(|r| r.name == c.name).unwrap();
        c.lipschitz = Some(r.lipschitz);
    }
    robust_cfg.solver.kkt_tol = 1e-11;
    let mut hard_cfg = robust_cfg.clone();
    let moved: Vec<ConstraintConfig> = hard_cfg
        .constraints
        .chance
        .drain(..)
        .map(|c| ConstraintConfig { level: None, ..c })
        .collect();
    hard_cfg.constraints.hard.extend(moved);
    let robust = Scenario::build(robust_cfg, "robust".into()).unwrap();
    let rmpc = Scenario::build(hard_cfg, "rmpc".into()).unwrap();
    let mut rng = stream_rng(53, 0);
    let (mut instances, mut binding, mut worst_tube, mut worst_alias) = (0, 0, 0.0f64, 0.0f64);
    let mut attempts = 0;
    while instances < 5 && attempts < 100 {
        attempts += 1;
        let x0 = Vector::from_vec(vec![rng.random_range(-1.25..1.25), rng.random_range(-0.5..0.5)]);
        if (x0[0] * x0[1]).abs() > 0.4 {
            continue;
        }
        let a = robust.setup.solve(&x0, None, &robust.config.solver).unwrap();
        let b = rmpc.setup.solve(&x0, None, &rmpc.config.solver).unwrap();
        if a.status != SolveStatus::Solved || b.status != SolveStatus::Solved {
            continue;
        }
        instances += 1;
        let active = robust.setup.active_constraints(&a.traj, 1e-6);
        binding += usize::from(active.iter().any(|(t, _)| matches!(t, Tag::Chance { .. })));
        let r = robust.setup.robust();
        for (l, &p) in a.levels.iter().enumerate() {
            if p == 1.0 {
                for k in 0..a.traj.s[l].len() {
                    worst_alias = worst_alias.max((a.traj.s[l][k] - a.traj.s[r][k]).abs());
                }
            }
        }
        let rb = rmpc.setup.robust();
        for k in 0..a.traj.s[r].len() {
            worst_tube = worst_tube.max((a.traj.s[r][k] - b.traj.s[rb][k]).abs());
        }
    }
    Verdict {
        id: 7,
        name: "robust-only reduction",
        passed: robust.setup.levels == [1.0] && instances == 5 && binding > 0 && worst_alias <= 1e-8 && worst_tube <= 1e-8,
        detail: format!(
            "{instances} instances ({binding} with a binding power tube): max |s^p − s¹| = {worst_alias:.2e}, max |s¹ − s¹_robust-MPC| = {worst_tube:.2e}"
        ),
    }
}

/// Exhaustive active-set enumeration for small strictly convex QPs.
fn enumerate(h: &Matrix, c: &Vector, a: &Matrix, b: &Vector) -> Option<Vector> {
    let n = c.len();
    let mi = a.nrows();
    let mut best: Option<(f64, Vector)> = None;
    for mask in 0u32..(1 << mi) {
        let idx: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > n {
            continue;
        }
        let k = idx.len();
        let mut kkt = Matrix::zeros(n + k, n + k);
        let mut rhs = Vector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for (q, &i) in idx.iter().enumerate() {
            for j in 0..n {
                kkt[(n + q, j)] = a[(i, j)];
                kkt[(j, n + q)] = a[(i, j)];
            }
            rhs[n + q] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if (a * &x - b).iter().all(|&v| v <= 1e-10) && (0..k).all(|q| sol[n + q] >= -1e-10) {
            let f = 0.5 * x.dot(&(h * &x)) + c.dot(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|b| b.1)
}

fn solver_correctness(dcdc: &Scenario) -> Verdict {
    let mut rng = stream_rng(59, 0);
    let (mut matched, mut qp_err) = (0, 0.0f64);
    let mut qp_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(2..=4);
        let mi = rng.random_range(1..=6);
        let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose() + Matrix::identity(n, n) * 0.5;
        let c = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = Matrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Vector::from_fn(mi, |_, _| rng.random_range(-0.2..1.0));
        let (a_eq, b_eq) = (Matrix::zeros(0, n), Vector::zeros(0));
        let p = QpProblem { h: &h, c: &c, a_eq: &a_eq, b_eq: &b_eq, a_in: &a, b_in: &b };
        let s = solve_qp(&p);
        match enumerate(&h, &c, &a, &b) {
            Some(x) => {
                let e = (&s.x - &x).amax();
                qp_err = qp_err.max(e);
                qp_ok &= s.status == QpStatus::Optimal && e <= 1e-8 && qp_kkt_residual(&p, &s) <= 1e-8;
                matched += 1;
            }
            None => qp_ok &= s.status == QpStatus::Infeasible,
        }
    }
    let mut worst_kkt = 0.0f64;
    let mut solved = 0;
    let mut rng = stream_rng(61, 0);
    for _ in 0..20 {
        let x0 = Vector::from_vec(vec![rng.random_range(-1.4..1.4), rng.random_range(-1.0..1.0)]);
        let sol = dcdc.setup.solve(&x0, None, &dcdc.config.solver).unwrap();
        if sol.status == SolveStatus::Solved {
            solved += 1;
            worst_kkt = worst_kkt.max(sol.kkt_residual);
        }
    }
    Verdict {
        id: 8,
        name: "solver correctness",
        passed: qp_ok && solved > 0 && worst_kkt <= 1e-6,
        detail: format!(
            "QP oracle: 100 problems ({matched} feasible), max |x − x_oracle| = {qp_err:.2e}; NLP: {solved}/20 solved, max KKT residual {worst_kkt:.2e}"
        ),
    }
}

fn main() {
    let dcdc = load("dcdc_benchmark.toml");
    let mut verdicts = vec![
        recursive_feasibility(),
        coverage(&dcdc),
        monotonicity(&dcdc),
        contraction(&dcdc),
        rmpc_reduction(),
        solver_correctness(&dcdc),
    ];
    verdicts.extend(closed_loop(&dcdc));
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!(
            "{} criterion {}: {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    if verdicts.iter().any(|v| !v.passed) {
        std::process::exit(1);
    }
}
