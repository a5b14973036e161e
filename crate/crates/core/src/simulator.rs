//! Closed-loop Monte Carlo simulation and the statistical and structural
//! verifiers run on its traces.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EvalMode, Scenario};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::ConstraintFn;
use crate::nlp::SolveStatus;
use crate::ocp::{worst, Tag, Trajectory};
use crate::report::CheckOutcome;
use crate::sampling::{par_sample, stream_rng};

/// Tolerance used by the structural candidate checks.
pub const CANDIDATE_TOL: f64 = 1e-6;

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    /// Applied input `u(t) = u*_{0|t}` (or the candidate's first input after a failed solve).
    pub u: Vector,
    pub theta: Vector,
    pub value: f64,
    pub status: SolveStatus,
    pub fallback: bool,
    pub iterations: usize,
    /// `s^{p,*}_{1|t}` per level, ascending in `p`.
    pub s1: Vec<f64>,
    /// `h_j(x(t+1), u(t+1)) ≤ 0` per chance constraint.
    pub chance_ok: Vec<bool>,
    /// Every hard constraint holds at `(x(t), u(t))`.
    pub hard_ok: bool,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub seed: u64,
    pub replication: usize,
    pub trace: Vec<StepRecord>,
    /// Prediction used at each step.
    pub predictions: Vec<Trajectory>,
    /// `x(T)`.
    pub final_state: Vector,
    pub wall_time: Duration,
}

impl SimulationRun {
    pub fn steps(&self) -> usize {
        self.trace.len()
    }

    /// `x(t+1)` for `t < T`.
    pub fn successor(&self, t: usize) -> &Vector {
        self.trace.get(t + 1).map_or(&self.final_state, |r| &r.x)
    }

    pub fn feasibility_rate(&self) -> f64 {
        let solved = self.trace.iter().filter(|r| !r.fallback).count();
        solved as f64 / self.trace.len() as f64
    }
}

/// Runs one replication: bind, solve (warm started from the candidate),
/// apply the first input, sample `θ`, step the true system.
///
/// An unsolved OCP at `t = 0` aborts; later failures apply the candidate
/// solution and are flagged in the trace.
pub fn run_closed_loop(sc: &Scenario, replication: usize, seed: u64) -> Result<SimulationRun> {
    let steps = sc.config.simulation.steps;
    if steps == 0 {
        return Err(Error::Usage("simulation needs at least one step".into()));
    }
    let setup = &sc.setup;
    let opts = &sc.config.solver;
    let mut rng = stream_rng(seed, replication as u64);
    let mut x = sc.x0.clone();
    let mut prev: Option<Trajectory> = None;
    let mut trace: Vec<StepRecord> = Vec::with_capacity(steps);
    let mut predictions = Vec::with_capacity(steps);
    let start = Instant::now();
    for t in 0..=steps {
        let warm = prev.as_ref().map(|p| setup.candidate(p, &x));
        let sol = setup.solve(&x, warm.as_ref(), opts)?;
        let (traj, fallback) = if sol.status == SolveStatus::Solved {
            (sol.traj, false)
        } else if let Some(c) = warm {
            log::warn!(
                "replication {replication}, t = {t}: OCP {} (violation {:.3e}); applying candidate input",
                sol.status.as_str(),
                sol.violation
            );
            (c, true)
        } else {
            return Err(Error::Infeasible(format!(
                "OCP at t = 0 from x = {:?} ended with status {} (violation {:.3e}, KKT residual {:.3e})",
                x.as_slice(),
                sol.status.as_str(),
                sol.violation,
                sol.kkt_residual
            )));
        };
        // Solver tolerance may leave |u| a hair above an input bound.
        let u = setup.clip_input(&traj.u[0]);
        if let Some(last) = trace.last_mut() {
            last.chance_ok = setup.constraints.chance.iter().map(|c| c.map.eval(&x, &u) <= 0.0).collect();
        }
        if t == steps {
            break;
        }
        let hard_ok = setup.constraints.hard.iter().all(|h| h.map.eval(&x, &u) <= 0.0);
        let theta = setup.dm.sample_theta(&mut rng);
        let x_next = setup.model.step_disturbed(&x, &u, &theta)?;
        trace.push(StepRecord {
            t,
            x: x.clone(),
            u,
            theta,
            value: sol.value,
            status: sol.status,
            fallback,
            iterations: sol.iterations,
            s1: traj.s.iter().map(|s| s[1]).collect(),
            chance_ok: Vec::new(),
            hard_ok,
        });
        predictions.push(traj.clone());
        prev = Some(traj);
        x = x_next;
    }
    Ok(SimulationRun {
        seed,
        replication,
        trace,
        predictions,
        final_state: x,
        wall_time: start.elapsed(),
    })
}

/// All replications of the scenario, in parallel, each on its own stream.
pub fn simulate(sc: &Scenario, seed: u64) -> Result<Vec<SimulationRun>> {
    let reps = sc.config.simulation.replications;
    if reps == 0 {
        return Err(Error::Usage("simulation needs at least one replication".into()));
    }
    (0..reps).into_par_iter().map(|r| run_closed_loop(sc, r, seed)).collect()
}

/// CSV trace: `t, x…, u…, θ…, V_N, status, s¹₁, s^p₁…, chance flags…,
/// hard_ok, fallback, iterations`, preceded by `#` provenance lines.
pub fn trace_csv(sc: &Scenario, run: &SimulationRun) -> String {
    let setup = &sc.setup;
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash = {}", sc.config_hash);
    let _ = writeln!(out, "# seed = {}, replication = {}", run.seed, run.replication);
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=setup.model.n()).map(|i| format!("x{i}")));
    cols.extend((1..=setup.model.m()).map(|i| if setup.model.m() == 1 { "u".into() } else { format!("u{i}") }));
    cols.extend((1..=setup.model.n_theta()).map(|i| format!("theta{i}")));
    cols.push("V_N".into());
    cols.push("status".into());
    let r = setup.robust();
    cols.push("s1_1".into());
    for (l, p) in setup.levels.iter().enumerate() {
        if l != r {
            cols.push(format!("s{p}_1"));
        }
    }
    cols.extend(setup.constraints.chance.iter().map(|c| format!("ok_{}", c.name)));
    cols.extend(["hard_ok".into(), "fallback".into(), "iterations".into()]);
    let _ = writeln!(out, "{}", cols.join(","));
    for rec in &run.trace {
        let mut row = vec![rec.t.to_string()];
        row.extend(rec.x.iter().map(|v| v.to_string()));
        row.extend(rec.u.iter().map(|v| v.to_string()));
        row.extend(rec.theta.iter().map(|v| v.to_string()));
        row.push(rec.value.to_string());
        row.push(rec.status.as_str().into());
        row.push(rec.s1[r].to_string());
        for (l, s) in rec.s1.iter().enumerate() {
            if l != r {
                row.push(s.to_string());
            }
        }
        row.extend(rec.chance_ok.iter().map(|&b| u8::from(b).to_string()));
        row.push(u8::from(rec.hard_ok).to_string());
        row.push(u8::from(rec.fallback).to_string());
        row.push(rec.iterations.to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Result of the candidate-solution verifier over one run.
#[derive(Debug, Clone, Default)]
pub struct CandidateReport {
    /// Consecutive step pairs whose first step was solved.
    pub pairs: usize,
    /// Pairs on which the per-step assumptions held.
    pub clean: usize,
    pub feasible_clean: usize,
    /// Largest constraint violation of any candidate.
    pub max_violation: f64,
    /// Terminal-free pairs whose appended step `(x_N, u_N, s_N)` violates its
    /// constraints.
    pub tail_failures: usize,
    /// Largest `√V_δ(x_{k|t+1}, x*_{k+1|t}) − ρ^k w^{1,*}_{0|t}`.
    pub max_ilf_excess: f64,
    /// Largest `V_δ(x_{k|t+1}, x*_{k+1|t}) / (ρ^{2k} (w^{1,*}_{0|t})²)`.
    pub max_ilf_ratio: f64,
    /// Largest `V_δ(x_{k|t+1}, x*_{k+1|t})`, to compare with `δ_loc`.
    pub max_ilf_value: f64,
    /// Largest excess in `s^p_{k|t+1} ≤ s^{p,*}_{k+1|t} − ρ^k w^{1,*}_{0|t}`.
    pub max_decrease_excess: f64,
    /// First infeasible clean candidate: step and constraint.
    pub first_failure: Option<(usize, Tag, f64)>,
    /// First assumption failure: step and description.
    pub first_assumption_failure: Option<(usize, String)>,
}

impl CandidateReport {
    pub fn rate(&self) -> f64 {
        if self.clean == 0 {
            1.0
        } else {
            self.feasible_clean as f64 / self.clean as f64
        }
    }

    pub fn merge(mut self, o: CandidateReport) -> Self {
        self.pairs += o.pairs;
        self.clean += o.clean;
        self.feasible_clean += o.feasible_clean;
        self.max_violation = self.max_violation.max(o.max_violation);
        self.tail_failures += o.tail_failures;
        self.max_ilf_excess = self.max_ilf_excess.max(o.max_ilf_excess);
        self.max_ilf_ratio = self.max_ilf_ratio.max(o.max_ilf_ratio);
        self.max_ilf_value = self.max_ilf_value.max(o.max_ilf_value);
        self.max_decrease_excess = self.max_decrease_excess.max(o.max_decrease_excess);
        self.first_failure = self.first_failure.or(o.first_failure);
        self.first_assumption_failure = self.first_assumption_failure.or(o.first_assumption_failure);
        self
    }

    /// Verdicts; `terminal_free` adds an informational entry on the appended step.
    pub fn outcomes(&self, delta_loc: f64, terminal_free: bool) -> Vec<CheckOutcome> {
        let feas = CheckOutcome::at_least("candidate-feasibility", self.clean, self.rate(), 1.0).with_witness(
            self.first_failure
                .map(|(t, tag, v)| format!("t = {t}: {tag:?} violated by {v:.3e}")),
        );
        let assumption = self
            .first_assumption_failure
            .as_ref()
            .map(|(t, what)| format!("t = {t}: {what}"));
        let mut out = vec![
            feas,
            CheckOutcome::at_most("candidate-ilf-bound", self.pairs, self.max_ilf_excess, CANDIDATE_TOL)
                .with_witness(assumption.clone()),
            CheckOutcome::at_most("candidate-ilf-local", self.pairs, self.max_ilf_value, delta_loc)
                .with_witness(assumption),
            CheckOutcome::at_most("candidate-tube-decrease", self.pairs, self.max_decrease_excess, CANDIDATE_TOL),
        ];
        if terminal_free {
            out.push(CheckOutcome::skipped(
                "candidate-tail",
                format!(
                    "no terminal set; appended step infeasible at {} of {} pairs, excluded as assumption failures",
                    self.tail_failures, self.pairs
                ),
            ));
        }
        out
    }
}

/// Builds the candidate at every solved step `t` from the realized `x(t+1)`
/// and checks it against all OCP constraints at `t + 1`, the incremental
/// Lyapunov bounds `V_δ(x_{k|t+1}, x*_{k+1|t}) ≤ ρ^{2k}(w^{1,*}_{0|t})² ≤ δ_loc`
/// and the tube decrease `s^p_{k|t+1} ≤ s^{p,*}_{k+1|t} − ρ^k w^{1,*}_{0|t}`
/// (for `p < 1` from `k = 1` on, since `s^p_{0|t+1} = 0` while
/// `s^{p,*}_{1|t} − w^{1,*}_{0|t} = w^{p,*}_{0|t} − w^{1,*}_{0|t}`).
///
/// Pairs on which the Lyapunov bounds fail are reported but excluded from
/// the feasibility rate. Without terminal ingredients the appended step
/// `(x_N, u_N, s_N)` has no invariance guarantee: its constraints are
/// treated as a per-step assumption and the remaining constraints are
/// checked.
pub fn verify_candidate_feasibility(sc: &Scenario, run: &SimulationRun) -> CandidateReport {
    let setup = &sc.setup;
    let design = &setup.design;
    let rho = design.rho;
    let r = setup.robust();
    let n_h = setup.horizon();
    let pairs: Vec<usize> = (0..run.steps()).filter(|&t| !run.trace[t].fallback).collect();
    let reports: Vec<CandidateReport> = pairs
        .par_iter()
        .map(|&t| {
            let pred = &run.predictions[t];
            let cand = setup.candidate(pred, run.successor(t));
            let w0 = pred.w[r][0].max(0.0);
            let mut rep = CandidateReport {
                pairs: 1,
                ..Default::default()
            };
            let mut clean = true;
            for k in 0..n_h {
                let vd = design.v(&cand.x[k], &pred.x[k + 1]);
                let radius = rho.powi(k as i32) * w0;
                let excess = vd.sqrt() - radius;
                rep.max_ilf_excess = rep.max_ilf_excess.max(excess);
                rep.max_ilf_value = rep.max_ilf_value.max(vd);
                let ratio = if radius > 0.0 {
                    vd / (radius * radius)
                } else if vd > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                rep.max_ilf_ratio = rep.max_ilf_ratio.max(ratio);
                if clean && (excess > CANDIDATE_TOL || vd > design.delta_loc) {
                    clean = false;
                    rep.first_assumption_failure = Some((
                        t,
                        format!("k = {k}: V_δ = {vd:.3e}, ρ^(2k) w² = {:.3e}, δ_loc = {}", radius * radius, design.delta_loc),
                    ));
                }
            }
            for l in 0..setup.levels.len() {
                let first = if l == r { 0 } else { 1 };
                for k in first..n_h {
                    let bound = pred.s[l][k + 1] - rho.powi(k as i32) * w0;
                    rep.max_decrease_excess = rep.max_decrease_excess.max(cand.s[l][k] - bound);
                }
            }
            let violations = setup.violations(&cand);
            if setup.terminal.is_none() {
                let (tail, tag) = worst(violations.iter().copied().filter(|(g, _)| setup.is_tail(g)));
                if tail > CANDIDATE_TOL {
                    rep.tail_failures = 1;
                    if clean {
                        clean = false;
                        rep.first_assumption_failure =
                            Some((t, format!("no terminal set: tail {:?} violated by {tail:.3e}", tag.expect("violated"))));
                    }
                }
            }
            let (viol, tag) = worst(violations.into_iter().filter(|(g, _)| setup.terminal.is_some() || !setup.is_tail(g)));
            rep.max_violation = viol;
            if clean {
                rep.clean = 1;
                if viol <= CANDIDATE_TOL {
                    rep.feasible_clean = 1;
                } else {
                    rep.first_failure = tag.map(|g| (t, g, viol));
                }
            }
            rep
        })
        .collect();
    reports.into_iter().fold(CandidateReport::default(), CandidateReport::merge)
}

/// Largest `s^{p,*}_{k|t} − s^{1,*}_{k|t}` over all predictions.
pub fn tube_ordering_check(sc: &Scenario, runs: &[SimulationRun]) -> CheckOutcome {
    let r = sc.setup.robust();
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    let mut witness = None;
    for run in runs {
        for (t, pred) in run.predictions.iter().enumerate() {
            count += 1;
            for (l, s) in pred.s.iter().enumerate() {
                for (k, &v) in s.iter().enumerate() {
                    let gap = v - pred.s[r][k];
                    if gap > worst {
                        worst = gap;
                        witness = Some(format!("replication {}, t = {t}, level {}, k = {k}", run.replication, sc.setup.levels[l]));
                    }
                }
            }
        }
    }
    CheckOutcome::at_most("tube-ordering", count, worst.max(0.0), CANDIDATE_TOL).with_witness(witness)
}

/// Per-constraint estimate from [`verify_chance_tightening`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChanceEstimate {
    pub name: String,
    pub level: f64,
    pub instance: usize,
    pub t: usize,
    pub rate: f64,
}

/// For `instances` closed-loop states drawn from the runs, estimates
/// `ℙ_t[h_j(x(t+1), u(t+1)) ≤ 0]` over `trials` samples of `θ(t)`, and
/// requires each estimate to reach `p_j − 3·√(p_j(1 − p_j)/trials)`; for
/// `p_j = 1` no violation is allowed.
///
/// `Nested` obtains `u(t+1)` from a fresh OCP solve at the sampled successor;
/// when no chance constraint depends on `u` that solve cannot affect the
/// estimate and is skipped. `Shifted` uses `u*_{1|t}`.
pub fn verify_chance_tightening(
    sc: &Scenario,
    runs: &[SimulationRun],
    mode: EvalMode,
    instances: usize,
    trials: usize,
    seed: u64,
) -> Result<(Vec<CheckOutcome>, Vec<ChanceEstimate>)> {
    if instances == 0 || trials == 0 {
        return Err(Error::Usage("chance-tightening check needs instances and trials".into()));
    }
    let setup = &sc.setup;
    let pool: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .flat_map(|(i, run)| (0..run.steps()).filter(|&t| !run.trace[t].fallback).map(move |t| (i, t)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Usage("no solved closed-loop states to sample from".into()));
    }
    let mut rng = stream_rng(seed, 1 << 20);
    let picks: Vec<(usize, usize)> = if instances >= pool.len() {
        pool.clone()
    } else {
        let mut idx = sample_indices(&mut rng, pool.len(), instances).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let chance = &setup.constraints.chance;
    let needs_solve = mode == EvalMode::Nested && chance.iter().any(|c| c.map.depends_on_input());
    let mut estimates = Vec::new();
    for (inst, &(ri, t)) in picks.iter().enumerate() {
        let run = &runs[ri];
        let (x, u) = (&run.trace[t].x, &run.trace[t].u);
        let pred = &run.predictions[t];
        let shifted = if setup.horizon() > 1 { pred.u[1].clone() } else { pred.u_terminal.clone() };
        let flags = par_sample(seed.wrapping_add(inst as u64 + 1), trials, |rng| -> Result<Vec<bool>> {
            let theta = setup.dm.sample_theta(rng);
            let x1 = setup.model.step_disturbed(x, u, &theta)?;
            let u1 = if needs_solve {
                let warm = setup.candidate(pred, &x1);
                let sol = setup.solve(&x1, Some(&warm), &sc.config.solver)?;
                let first = if sol.status == SolveStatus::Solved { &sol.traj.u[0] } else { &warm.u[0] };
                setup.clip_input(first)
            } else {
                shifted.clone()
            };
            Ok(chance.iter().map(|c| c.map.eval(&x1, &u1) <= 0.0).collect())
        });
        let flags: Vec<Vec<bool>> = flags.into_iter().collect::<Result<_>>()?;
        for (j, c) in chance.iter().enumerate() {
            let ok = flags.iter().filter(|f| f[j]).count();
            estimates.push(ChanceEstimate {
                name: c.name.clone(),
                level: c.level,
                instance: inst,
                t,
                rate: ok as f64 / trials as f64,
            });
        }
    }
    let mut outcomes = Vec::new();
    for c in chance {
        let p = c.level;
        let threshold = if p >= 1.0 { 1.0 } else { p - 3.0 * (p * (1.0 - p) / trials as f64).sqrt() };
        let worst = estimates
            .iter()
            .filter(|e| e.name == c.name)
            .min_by(|a, b| a.rate.total_cmp(&b.rate))
            .expect("at least one instance");
        outcomes.push(
            CheckOutcome::at_least(format!("chance-tightening[{}]", c.name), picks.len() * trials, worst.rate, threshold)
                .with_witness(Some(format!("instance {} (t = {})", worst.instance, worst.t))),
        );
    }
    Ok((outcomes, estimates))
}

/// Pooled satisfaction rate with a 95% Wilson interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateStat {
    pub name: String,
    pub satisfied: usize,
    pub total: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateStat {
    pub fn new(name: impl Into<String>, satisfied: usize, total: usize) -> Self {
        let (lo, hi) = wilson_interval(satisfied, total, 1.959963984540054);
        RateStat {
            name: name.into(),
            satisfied,
            total,
            rate: if total == 0 { 1.0 } else { satisfied as f64 / total as f64 },
            ci_low: lo,
            ci_high: hi,
        }
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    if k == n {
        ((centre - half).clamp(0.0, 1.0), 1.0)
    } else if k == 0 {
        (0.0, (centre + half).clamp(0.0, 1.0))
    } else {
        ((centre - half).clamp(0.0, 1.0), (centre + half).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateStats {
    pub replications: usize,
    pub steps: usize,
    /// All chance constraints jointly satisfied.
    pub joint: RateStat,
    pub per_constraint: Vec<RateStat>,
    pub hard_violations: usize,
    pub fallbacks: usize,
    pub feasibility_rates: Vec<f64>,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Pools every run's steps.
pub fn aggregate_stats(sc: &Scenario, runs: &[SimulationRun]) -> Result<AggregateStats> {
    if runs.is_empty() {
        return Err(Error::Usage("aggregate needs at least one run".into()));
    }
    let chance = &sc.setup.constraints.chance;
    let records = || runs.iter().flat_map(|r| r.trace.iter());
    let steps = records().count();
    let per_constraint = chance
        .iter()
        .enumerate()
        .map(|(j, c)| RateStat::new(c.name.clone(), records().filter(|r| r.chance_ok[j]).count(), steps))
        .collect();
    let joint = RateStat::new("joint", records().filter(|r| r.chance_ok.iter().all(|&b| b)).count(), steps);
    let iters: Vec<usize> = records().map(|r| r.iterations).collect();
    Ok(AggregateStats {
        replications: runs.len(),
        steps,
        joint,
        per_constraint,
        hard_violations: records().filter(|r| !r.hard_ok).count(),
        fallbacks: records().filter(|r| r.fallback).count(),
        feasibility_rates: runs.iter().map(SimulationRun::feasibility_rate).collect(),
        mean_iterations: iters.iter().sum::<usize>() as f64 / steps.max(1) as f64,
        max_iterations: iters.iter().copied().max().unwrap_or(0),
        wall_time: runs.iter().map(|r| r.wall_time).sum(),
    })
}

impl AggregateStats {
    /// Structured text summary with provenance.
    pub fn to_toml(&self, sc: &Scenario, seed: u64) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            seed: u64,
            #[serde(flatten)]
            stats: &'a AggregateStats,
        }
        toml::to_string_pretty(&Summary {
            config_hash: &sc.config_hash,
            seed,
            stats: self,
        })
        .expect("summary serializes")
    }
}

/// Plot description for the state-plane figure: trace files, constraint
/// boundary curves in red and the initial state.
pub fn plot_description(sc: &Scenario, seed: u64, trace_files: &[String]) -> String {
    let setup = &sc.setup;
    let mut out = String::new();
    let _ = writeln!(out, "# State-plane plot: closed-loop trajectories and chance-constraint boundaries.");
    let _ = writeln!(out, "config_hash = \"{}\"", sc.config_hash);
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "title = \"Closed-loop states\"");
    let _ = writeln!(out, "x_label = \"x1\"\ny_label = \"x2\"");
    let d = &sc.domain;
    if d.n() >= 2 {
        let _ = writeln!(
            out,
            "x_range = [{}, {}]\ny_range = [{}, {}]",
            d.state_lower[0], d.state_upper[0], d.state_lower[1], d.state_upper[1]
        );
    }
    for file in trace_files {
        let _ = writeln!(out, "\n[[series]]\nfile = \"{file}\"\nx_column = \"x1\"\ny_column = \"x2\"\nstyle = \"line\"");
    }
    if setup.model.n() == 2 {
        for c in &setup.constraints.chance {
            for (branch, pts) in boundary_curves(&c.map, d).into_iter().enumerate() {
                let pts: Vec<String> = pts.iter().map(|(a, b)| format!("[{a:.6}, {b:.6}]")).collect();
                let _ = writeln!(
                    out,
                    "\n[[curve]]\nname = \"{} boundary {branch}\"\ncolor = \"red\"\npoints = [{}]",
                    c.name,
                    pts.join(", ")
                );
            }
        }
    }
    let x0 = &sc.x0;
    if x0.len() >= 2 {
        let _ = writeln!(out, "\n[[marker]]\nname = \"initial state\"\npoint = [{}, {}]", x0[0], x0[1]);
    }
    out
}

/// Sampled zero level set of a state-only constraint in the `(x₁, x₂)` plane,
/// clipped to the domain box.
fn boundary_curves(map: &ConstraintFn, d: &crate::sampling::BoxDomain) -> Vec<Vec<(f64, f64)>> {
    let (x_lo, x_hi, y_lo, y_hi) = (d.state_lower[0], d.state_upper[0], d.state_lower[1], d.state_upper[1]);
    let inside = |y: f64| (y_lo..=y_hi).contains(&y);
    let grid = |lo: f64, hi: f64| (0..=200).map(move |i| lo + (hi - lo) * i as f64 / 200.0);
    match map {
        ConstraintFn::StateProduct { i: 0, j: 1, scale, offset } | ConstraintFn::StateProduct { i: 1, j: 0, scale, offset } => {
            let c = -offset / scale;
            let branch = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
                grid(lo, hi).filter(|&x| x != 0.0).map(|x| (x, c / x)).filter(|&(_, y)| inside(y)).collect()
            };
            vec![branch(x_lo, x_lo.min(0.0)), branch(x_hi.max(0.0), x_hi)]
                .into_iter()
                .filter(|b| b.len() > 1)
                .collect()
        }
        ConstraintFn::Affine { state, input, offset } if input.amax() == 0.0 && state.len() == 2 => {
            let (a, b) = (state[0], state[1]);
            let pts: Vec<(f64, f64)> = if b != 0.0 {
                grid(x_lo, x_hi).map(|x| (x, -(a * x + offset) / b)).filter(|&(_, y)| inside(y)).collect()
            } else if a != 0.0 {
                grid(y_lo, y_hi).map(|y| (-offset / a, y)).collect()
            } else {
                Vec::new()
            };
            if pts.len() > 1 {
                vec![pts]
            } else {
                Vec::new()
            }
        }
        _ => Vec::new(),
    }
}
