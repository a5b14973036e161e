//! Finite-horizon optimal control problem with augmented tube dynamics,
//! assembled as a dense NLP (direct multiple shooting).
//!
//! Decision vector, in order: `u_0 … u_{N−1}` (plus an auxiliary `u_N` when no
//! terminal controller is configured), `x_1 … x_N`, the tube sizes `s^p_1 …
//! s^p_N` per level, then the bound values `w^p_0 … w^p_{N−1}` per level.
//! With tube elimination the `s` block is dropped and every `s^p_k` is
//! expressed through the linear recursion in the `w` variables.

use std::cell::RefCell;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::disturbance::{DisturbanceModel, TubeBoundSpec};
use crate::error::{check_dim, Error, Result};
use crate::ilf::IlfDesign;
use crate::linalg::{eig_range, is_symmetric, Matrix, Vector};
use crate::model::{ConstraintSpec, CostSpec, SystemModel};
use crate::nlp::{solve_from, NlpProblem, SolveOptions, SolveStatus};
use crate::report::CheckOutcome;
use crate::sampling::{par_sample, unit_ball, Rng64};

/// Terminal ingredients: `V_f(x) = xᵀP_f x`, `k_f(x) = K_f x` and
/// `𝒳_f = {(x, s) : V_f(x) ≤ γ_f, 0 ≤ s ≤ s_f}`.
#[derive(Debug, Clone)]
pub struct TerminalDesign {
    pub p_f: Matrix,
    pub k_f: Matrix,
    pub gamma_f: f64,
    pub s_f: f64,
    pub w_bar: f64,
}

impl TerminalDesign {
    pub fn new(p_f: Matrix, k_f: Matrix, gamma_f: f64, s_f: f64, w_bar: f64) -> Result<Self> {
        if !is_symmetric(&p_f, 1e-10) || eig_range(&p_f).0 <= 0.0 {
            return Err(Error::Config("terminal P_f must be symmetric positive definite".into()));
        }
        check_dim("columns of K_f", p_f.nrows(), k_f.ncols())?;
        if !(gamma_f > 0.0 && s_f >= 0.0 && w_bar >= 0.0) {
            return Err(Error::Config(
                "terminal levels need γ_f > 0, s_f ≥ 0 and w̄ ≥ 0".into(),
            ));
        }
        Ok(TerminalDesign {
            p_f,
            k_f,
            gamma_f,
            s_f,
            w_bar,
        })
    }

    pub fn control(&self, x: &Vector) -> Vector {
        &self.k_f * x
    }

    pub fn cost(&self, x: &Vector) -> f64 {
        x.dot(&(&self.p_f * x))
    }

    pub fn contains(&self, x: &Vector, s: f64) -> bool {
        self.cost(x) <= self.gamma_f && (0.0..=self.s_f).contains(&s)
    }
}

/// Immutable problem definition shared by every solve.
#[derive(Debug, Clone)]
pub struct OcpSetup {
    pub model: SystemModel,
    pub constraints: ConstraintSpec,
    pub cost: CostSpec,
    pub design: IlfDesign,
    pub dm: DisturbanceModel,
    pub tb: TubeBoundSpec,
    /// `𝒫 ∪ {1}` in ascending order; the robust level is last.
    pub levels: Vec<f64>,
    pub c_hard: Vec<f64>,
    pub c_chance: Vec<f64>,
    /// Index into `levels` for each chance constraint.
    pub chance_level: Vec<usize>,
    pub terminal: Option<TerminalDesign>,
    pub s_bar: f64,
    pub eliminate_tubes: bool,
    pub fd_step: f64,
    input_lower: Vector,
    input_upper: Vector,
}

impl OcpSetup {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: SystemModel,
        constraints: ConstraintSpec,
        cost: CostSpec,
        design: IlfDesign,
        dm: DisturbanceModel,
        tb: TubeBoundSpec,
        terminal: Option<TerminalDesign>,
        eliminate_tubes: bool,
    ) -> Result<Self> {
        let (n, m) = (model.n(), model.m());
        check_dim("ILF states", n, design.n())?;
        check_dim("ILF inputs", m, design.m())?;
        check_dim("disturbance parameters", model.n_theta(), dm.n_theta())?;
        check_dim("cost Q", n, cost.q.nrows())?;
        check_dim("cost R", m, cost.r.nrows())?;
        let mut levels: Vec<f64> = constraints.levels().to_vec();
        if levels.last().is_none_or(|&p| p < 1.0) {
            levels.push(1.0);
        }
        tb.require_levels(&levels)?;
        let mut c_hard = Vec::new();
        for h in &constraints.hard {
            c_hard.push(h.tightening.ok_or_else(|| {
                Error::Config(format!("hard constraint `{}` has no tightening constant", h.name))
            })?);
        }
        let mut c_chance = Vec::new();
        let mut chance_level = Vec::new();
        for c in &constraints.chance {
            c_chance.push(c.tightening.ok_or_else(|| {
                Error::Config(format!("chance constraint `{}` has no tightening constant", c.name))
            })?);
            let idx = levels
                .iter()
                .position(|&p| (p - c.level).abs() <= 1e-12)
                .ok_or_else(|| Error::Config(format!("level {} not in level set", c.level)))?;
            chance_level.push(idx);
        }
        let s_bar = design.s_bar();
        if let Some(t) = &terminal {
            check_dim("terminal P_f", n, t.p_f.nrows())?;
            check_dim("rows of K_f", m, t.k_f.nrows())?;
            if t.s_f > s_bar {
                return Err(Error::Config(format!(
                    "terminal tube bound s_f = {} exceeds s̄ = {s_bar}",
                    t.s_f
                )));
            }
        }
        let (input_lower, input_upper) = constraints.input_box(m);
        Ok(OcpSetup {
            model,
            constraints,
            cost,
            design,
            dm,
            tb,
            levels,
            c_hard,
            c_chance,
            chance_level,
            terminal,
            s_bar,
            eliminate_tubes,
            fd_step: 1e-6,
            input_lower,
            input_upper,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cost.horizon
    }

    pub fn robust(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n: self.model.n(),
            m: self.model.m(),
            horizon: self.horizon(),
            n_levels: self.levels.len(),
            eliminated: self.eliminate_tubes,
            aux_input: self.terminal.is_none(),
        }
    }

    pub fn clip_input(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            (0..u.len()).map(|j| u[j].clamp(self.input_lower[j], self.input_upper[j])),
        )
    }

    fn w_tilde(&self, level: usize, x: &Vector, u: &Vector, c: f64) -> f64 {
        self.tb
            .w_tilde_delta(&self.dm, &self.model, self.levels[level], x, u, c.max(0.0))
            .expect("levels validated at construction")
    }

    /// Nominal rollout from `x0` with the given inputs and the tube recursion
    /// closed with `w = w̃`.
    pub fn rollout(&self, x0: &Vector, inputs: Vec<Vector>, u_terminal: Option<Vector>) -> Trajectory {
        let n_h = self.horizon();
        let mut x = Vec::with_capacity(n_h + 1);
        x.push(x0.clone());
        for k in 0..n_h {
            let next = self.model.f(&x[k], &inputs[k]);
            x.push(next);
        }
        let u_terminal = match &self.terminal {
            Some(t) => t.control(&x[n_h]),
            None => u_terminal.unwrap_or_else(|| self.clip_input(&inputs[n_h - 1])),
        };
        let mut traj = Trajectory {
            x,
            u: inputs,
            u_terminal,
            s: vec![vec![0.0; n_h + 1]; self.levels.len()],
            w: vec![vec![0.0; n_h]; self.levels.len()],
        };
        self.close_tubes(&mut traj);
        traj
    }

    /// Recomputes `w^p_k = w̃^p(x_k, u_k, s^p_k)` and the tube recursion.
    pub fn close_tubes(&self, traj: &mut Trajectory) {
        let r = self.robust();
        let rho = self.design.rho;
        for l in 0..self.levels.len() {
            traj.s[l][0] = 0.0;
        }
        for k in 0..self.horizon() {
            for l in 0..self.levels.len() {
                traj.w[l][k] = self.w_tilde(l, &traj.x[k], &traj.u[k], traj.s[l][k]);
            }
            let s1 = traj.s[r][k];
            for l in 0..self.levels.len() {
                traj.s[l][k + 1] = rho * s1 + traj.w[l][k];
            }
        }
    }

    /// Cold start: zero inputs.
    pub fn cold_start(&self, x0: &Vector) -> Trajectory {
        let inputs = vec![Vector::zeros(self.model.m()); self.horizon()];
        self.rollout(x0, inputs, None)
    }

    /// Shifted candidate at the successor state: inputs
    /// `κ(x_{k|t+1}, x*_{k+1|t}, u*_{k+1|t})`, nominal rollout from `x_next`,
    /// tubes closed with `w = w̃`. Without a terminal controller the auxiliary
    /// input repeats the last input, clipped to the input box.
    pub fn candidate(&self, prev: &Trajectory, x_next: &Vector) -> Trajectory {
        let n_h = self.horizon();
        let mut x = Vec::with_capacity(n_h + 1);
        let mut u = Vec::with_capacity(n_h);
        x.push(x_next.clone());
        for k in 0..n_h {
            let z = &prev.x[k + 1];
            let v = if k + 1 < n_h { &prev.u[k + 1] } else { &prev.u_terminal };
            let uk = self.design.feedback(&x[k], z, v);
            x.push(self.model.f(&x[k], &uk));
            u.push(uk);
        }
        let u_terminal = match &self.terminal {
            Some(t) => t.control(&x[n_h]),
            None => self.clip_input(&u[n_h - 1]),
        };
        let mut traj = Trajectory {
            x,
            u,
            u_terminal,
            s: vec![vec![0.0; n_h + 1]; self.levels.len()],
            w: vec![vec![0.0; n_h]; self.levels.len()],
        };
        self.close_tubes(&mut traj);
        traj
    }

    pub fn bind(&self, x0: &Vector, warm: Option<&Trajectory>) -> Result<BoundOcp<'_>> {
        check_dim("initial state", self.model.n(), x0.len())?;
        let layout = self.layout();
        let guess = match warm {
            Some(t) => t.clone(),
            None => self.cold_start(x0),
        };
        let tags = layout.tags(self);
        let z0 = layout.pack(&guess);
        Ok(BoundOcp {
            setup: self,
            x0: x0.clone(),
            layout,
            eq_tags: tags.0,
            in_tags: tags.1,
            guess: z0,
            cache: RefCell::new(None),
        })
    }

    /// Binds, solves and unpacks.
    pub fn solve(&self, x0: &Vector, warm: Option<&Trajectory>, opts: &SolveOptions) -> Result<OcpSolution> {
        let bound = self.bind(x0, warm)?;
        let rep = solve_from(&bound, bound.guess.clone(), opts);
        let traj = bound.layout.unpack(&rep.x, &bound);
        Ok(OcpSolution {
            value: bound.objective(&rep.x),
            status: rep.status,
            iterations: rep.iterations,
            kkt_residual: rep.kkt_residual,
            violation: rep.violation,
            levels: self.levels.clone(),
            traj,
        })
    }

    /// Every violated constraint of the problem at a trajectory bound to its
    /// own initial state.
    pub fn violations(&self, traj: &Trajectory) -> Vec<(Tag, f64)> {
        let full = OcpSetup {
            eliminate_tubes: false,
            ..self.clone()
        };
        let bound = full.bind(&traj.x[0], Some(traj)).expect("dimensions match");
        let z = bound.guess.clone();
        let ce = bound.eq(&z);
        let ci = bound.ineq(&z);
        let eq = ce.iter().enumerate().filter(|(_, v)| v.abs() > 0.0).map(|(i, v)| (bound.eq_tags[i], v.abs()));
        let ineq = ci.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (bound.in_tags[i], v));
        eq.chain(ineq).collect()
    }

    /// Largest violation of the problem's constraints at a trajectory bound to
    /// its own initial state, together with the offending constraint.
    pub fn max_violation(&self, traj: &Trajectory) -> (f64, Option<Tag>) {
        worst(self.violations(traj).into_iter())
    }

    /// Whether a constraint involves only `(x_N, u_N, s_N)`, the step a
    /// shifted solution appends beyond the previous horizon.
    pub fn is_tail(&self, tag: &Tag) -> bool {
        let n = self.horizon();
        match *tag {
            Tag::Hard { k, .. } | Tag::TubeCap { k } => k == n,
            Tag::Chance { k, .. } => k + 1 == n,
            _ => false,
        }
    }
}

/// Largest entry, `(0, None)` when empty.
pub fn worst(v: impl Iterator<Item = (Tag, f64)>) -> (f64, Option<Tag>) {
    v.fold((0.0, None), |(w, t), (tag, x)| if x > w { (x, Some(tag)) } else { (w, t) })
}

impl OcpSetup {
    /// Inequality constraints within `tol` of their bound at a trajectory,
    /// with their values.
    pub fn active_constraints(&self, traj: &Trajectory, tol: f64) -> Vec<(Tag, f64)> {
        let full = OcpSetup {
            eliminate_tubes: false,
            ..self.clone()
        };
        let bound = full.bind(&traj.x[0], Some(traj)).expect("dimensions match");
        let ci = bound.ineq(&bound.guess);
        ci.iter()
            .enumerate()
            .filter(|(_, &v)| v >= -tol)
            .map(|(i, &v)| (bound.in_tags[i], v))
            .collect()
    }
}

/// State, input and tube trajectories of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 … x_N`
    pub x: Vec<Vector>,
    /// `u_0 … u_{N−1}`
    pub u: Vec<Vector>,
    /// `u_N`: `k_f(x_N)` or the auxiliary input.
    pub u_terminal: Vector,
    /// `s[level][k]`, `k = 0 … N`
    pub s: Vec<Vec<f64>>,
    /// `w[level][k]`, `k = 0 … N−1`
    pub w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub status: SolveStatus,
    /// `V_N`
    pub value: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub violation: f64,
    pub levels: Vec<f64>,
    pub traj: Trajectory,
}

/// Constraint identity: kind plus its `(k, i, j, p)` indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    /// `x_{k+1} − f(x_k, u_k) = 0`, component `i`.
    Dynamics { k: usize, i: usize },
    /// `s^p_{k+1} − ρ s¹_k − w^p_k = 0`.
    Tube { k: usize, level: usize },
    /// `w̃^p(x_k, u_k, s^p_k) − w^p_k ≤ 0`.
    Bound { k: usize, level: usize },
    /// `h_j(x_{k+1}, u_{k+1}) + c^P_j s^{p_j}_{k+1} ≤ 0`.
    Chance { k: usize, j: usize },
    /// `g_i(x_k, u_k) + c^R_i s¹_k ≤ 0`.
    Hard { k: usize, i: usize },
    /// `s¹_k − s̄ ≤ 0`.
    TubeCap { k: usize },
    /// `w^p_k − w¹_k ≤ 0`.
    BoundOrder { k: usize, level: usize },
    /// `w¹_k − w̄ ≤ 0`.
    BoundCap { k: usize },
    /// `x_Nᵀ P_f x_N − γ_f ≤ 0`.
    TerminalState,
    /// `s¹_N − s_f ≤ 0`.
    TerminalTube,
}

/// Index map of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub n_levels: usize,
    pub eliminated: bool,
    pub aux_input: bool,
}

impl Layout {
    fn n_inputs(&self) -> usize {
        self.horizon + usize::from(self.aux_input)
    }

    /// Start of `u_k`, `k ≤ N` (`k = N` only with the auxiliary input).
    pub fn u(&self, k: usize) -> usize {
        k * self.m
    }

    /// Start of `x_k`, `1 ≤ k ≤ N`.
    pub fn x(&self, k: usize) -> usize {
        self.n_inputs() * self.m + (k - 1) * self.n
    }

    /// Index of `s^p_k`, `1 ≤ k ≤ N`, when tubes are explicit.
    pub fn s(&self, level: usize, k: usize) -> Option<usize> {
        (!self.eliminated).then(|| {
            self.n_inputs() * self.m + self.horizon * self.n + level * self.horizon + (k - 1)
        })
    }

    /// Index of `w^p_k`, `0 ≤ k < N`.
    pub fn w(&self, level: usize, k: usize) -> usize {
        let s_block = if self.eliminated { 0 } else { self.n_levels * self.horizon };
        self.n_inputs() * self.m + self.horizon * self.n + s_block + level * self.horizon + k
    }

    pub fn len(&self) -> usize {
        self.w(0, 0) + self.n_levels * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `s^p_k` as a linear combination of decision variables.
    pub fn s_terms(&self, level: usize, k: usize, robust: usize, rho: f64) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        if let Some(i) = self.s(level, k) {
            return vec![(i, 1.0)];
        }
        // s^p_k = w^p_{k−1} + Σ_{i ≤ k−2} ρ^{k−1−i} w¹_i
        let mut terms = vec![(self.w(level, k - 1), 1.0)];
        for i in 0..k - 1 {
            terms.push((self.w(robust, i), rho.powi((k - 1 - i) as i32)));
        }
        terms
    }

    fn tags(&self, setup: &OcpSetup) -> (Vec<Tag>, Vec<Tag>) {
        let n_h = self.horizon;
        let r = self.n_levels - 1;
        let mut eq = Vec::new();
        let mut ineq = Vec::new();
        for k in 0..n_h {
            for i in 0..self.n {
                eq.push(Tag::Dynamics { k, i });
            }
            if !self.eliminated {
                for level in 0..self.n_levels {
                    eq.push(Tag::Tube { k, level });
                }
            }
        }
        for k in 0..n_h {
            for level in 0..self.n_levels {
                ineq.push(Tag::Bound { k, level });
            }
            for j in 0..setup.c_chance.len() {
                ineq.push(Tag::Chance { k, j });
            }
            for i in 0..setup.c_hard.len() {
                ineq.push(Tag::Hard { k, i });
            }
            ineq.push(Tag::TubeCap { k: k + 1 });
            for level in 0..r {
                ineq.push(Tag::BoundOrder { k, level });
            }
            if setup.terminal.is_some() {
                ineq.push(Tag::BoundCap { k });
            }
        }
        if self.aux_input {
            for i in 0..setup.c_hard.len() {
                ineq.push(Tag::Hard { k: n_h, i });
            }
        }
        if setup.terminal.is_some() {
            ineq.push(Tag::TerminalState);
            ineq.push(Tag::TerminalTube);
        }
        (eq, ineq)
    }

    pub fn pack(&self, t: &Trajectory) -> Vector {
        let mut z = Vector::zeros(self.len());
        for k in 0..self.horizon {
            z.rows_mut(self.u(k), self.m).copy_from(&t.u[k]);
            z.rows_mut(self.x(k + 1), self.n).copy_from(&t.x[k + 1]);
            for l in 0..self.n_levels {
                if let Some(i) = self.s(l, k + 1) {
                    z[i] = t.s[l][k + 1];
                }
                z[self.w(l, k)] = t.w[l][k];
            }
        }
        if self.aux_input {
            z.rows_mut(self.u(self.horizon), self.m).copy_from(&t.u_terminal);
        }
        z
    }

    fn unpack(&self, z: &Vector, b: &BoundOcp<'_>) -> Trajectory {
        let n_h = self.horizon;
        let x: Vec<Vector> = (0..=n_h).map(|k| b.state(z, k)).collect();
        let u: Vec<Vector> = (0..n_h).map(|k| b.input(z, k)).collect();
        let u_terminal = b.input(z, n_h);
        let s = (0..self.n_levels)
            .map(|l| (0..=n_h).map(|k| b.s_value(z, l, k)).collect())
            .collect();
        let w = (0..self.n_levels)
            .map(|l| (0..n_h).map(|k| z[self.w(l, k)]).collect())
            .collect();
        Trajectory {
            x,
            u,
            u_terminal,
            s,
            w,
        }
    }
}

struct Evaluation {
    z: Vector,
    ce: Vector,
    je: Matrix,
    ci: Vector,
    ji: Matrix,
}

/// Problem instance bound to a measured state; implements [`NlpProblem`].
pub struct BoundOcp<'a> {
    pub setup: &'a OcpSetup,
    pub x0: Vector,
    pub layout: Layout,
    pub eq_tags: Vec<Tag>,
    pub in_tags: Vec<Tag>,
    guess: Vector,
    cache: RefCell<Option<Evaluation>>,
}

impl BoundOcp<'_> {
    pub fn state(&self, z: &Vector, k: usize) -> Vector {
        if k == 0 {
            self.x0.clone()
        } else {
            z.rows(self.layout.x(k), self.layout.n).into_owned()
        }
    }

    pub fn input(&self, z: &Vector, k: usize) -> Vector {
        if k < self.layout.horizon || self.layout.aux_input {
            z.rows(self.layout.u(k), self.layout.m).into_owned()
        } else {
            let t = self.setup.terminal.as_ref().expect("terminal input without terminal design");
            t.control(&self.state(z, k))
        }
    }

    pub fn s_value(&self, z: &Vector, level: usize, k: usize) -> f64 {
        self.s_terms(level, k).iter().map(|&(i, c)| c * z[i]).sum()
    }

    fn s_terms(&self, level: usize, k: usize) -> Vec<(usize, f64)> {
        self.layout.s_terms(level, k, self.setup.robust(), self.setup.design.rho)
    }

    pub fn guess(&self) -> &Vector {
        &self.guess
    }

    /// Adds `gx` (w.r.t. `x_k`) and `gu` (w.r.t. `u_k`) into `row`, routing
    /// the terminal input through `K_f`.
    fn add_state_input(&self, row: &mut [f64], k: usize, gx: &Vector, gu: &Vector) {
        let l = &self.layout;
        if k >= 1 {
            for i in 0..l.n {
                row[l.x(k) + i] += gx[i];
            }
        }
        if k < l.horizon || l.aux_input {
            for j in 0..l.m {
                row[l.u(k) + j] += gu[j];
            }
        } else if let Some(t) = &self.setup.terminal {
            let gx_extra = t.k_f.transpose() * gu;
            for i in 0..l.n {
                row[l.x(k) + i] += gx_extra[i];
            }
        }
    }

    fn evaluate(&self, z: &Vector) -> std::cell::Ref<'_, Evaluation> {
        let fresh = self.cache.borrow().as_ref().is_some_and(|e| &e.z == z);
        if !fresh {
            let e = self.compute(z);
            *self.cache.borrow_mut() = Some(e);
        }
        std::cell::Ref::map(self.cache.borrow(), |c| c.as_ref().expect("just filled"))
    }

    fn compute(&self, z: &Vector) -> Evaluation {
        let s = self.setup;
        let l = &self.layout;
        let nv = l.len();
        let n_h = l.horizon;
        let r = s.robust();
        let rho = s.design.rho;
        let xs: Vec<Vector> = (0..=n_h).map(|k| self.state(z, k)).collect();
        let us: Vec<Vector> = (0..=n_h).map(|k| self.input(z, k)).collect();
        let sv = |level: usize, k: usize| self.s_value(z, level, k);

        let mut ce = Vector::zeros(self.eq_tags.len());
        let mut je = Matrix::zeros(self.eq_tags.len(), nv);
        let mut dyn_cache: Vec<Option<(Vector, Matrix, Matrix)>> = vec![None; n_h];
        for (row, tag) in self.eq_tags.iter().enumerate() {
            let mut g = vec![0.0; nv];
            let val = match *tag {
                Tag::Dynamics { k, i } => {
                    let (f, a, b) = dyn_cache[k].get_or_insert_with(|| {
                        (
                            s.model.f(&xs[k], &us[k]),
                            s.model.jac_x(&xs[k], &us[k]),
                            s.model.jac_u(&xs[k], &us[k]),
                        )
                    });
                    g[l.x(k + 1) + i] += 1.0;
                    let ga = -a.row(i).transpose();
                    let gb = -b.row(i).transpose();
                    self.add_state_input(&mut g, k, &ga, &gb);
                    xs[k + 1][i] - f[i]
                }
                Tag::Tube { k, level } => {
                    for (i, c) in self.s_terms(level, k + 1) {
                        g[i] += c;
                    }
                    for (i, c) in self.s_terms(r, k) {
                        g[i] -= rho * c;
                    }
                    g[l.w(level, k)] -= 1.0;
                    sv(level, k + 1) - rho * sv(r, k) - z[l.w(level, k)]
                }
                _ => unreachable!("inequality tag in equality list"),
            };
            ce[row] = val;
            je.row_mut(row).copy_from_slice(&g);
        }

        let mut ci = Vector::zeros(self.in_tags.len());
        let mut ji = Matrix::zeros(self.in_tags.len(), nv);
        for (row, tag) in self.in_tags.iter().enumerate() {
            let mut g = vec![0.0; nv];
            let val = match *tag {
                Tag::Bound { k, level } => {
                    let c = sv(level, k);
                    let ev = s
                        .tb
                        .w_tilde_with_grad(&s.dm, &s.model, s.levels[level], &xs[k], &us[k], c.max(0.0), s.fd_step)
                        .expect("levels validated at construction");
                    self.add_state_input(&mut g, k, &ev.grad_x, &ev.grad_u);
                    if c > 0.0 {
                        for (i, cf) in self.s_terms(level, k) {
                            g[i] += ev.grad_c * cf;
                        }
                    }
                    g[l.w(level, k)] -= 1.0;
                    ev.value - z[l.w(level, k)]
                }
                Tag::Chance { k, j } => {
                    let cons = &s.constraints.chance[j];
                    let (gx, gu) = cons.map.grad(&xs[k + 1], &us[k + 1]);
                    self.add_state_input(&mut g, k + 1, &gx, &gu);
                    let level = s.chance_level[j];
                    for (i, cf) in self.s_terms(level, k + 1) {
                        g[i] += s.c_chance[j] * cf;
                    }
                    cons.map.eval(&xs[k + 1], &us[k + 1]) + s.c_chance[j] * sv(level, k + 1)
                }
                Tag::Hard { k, i } => {
                    let cons = &s.constraints.hard[i];
                    let (gx, gu) = cons.map.grad(&xs[k], &us[k]);
                    self.add_state_input(&mut g, k, &gx, &gu);
                    for (idx, cf) in self.s_terms(r, k) {
                        g[idx] += s.c_hard[i] * cf;
                    }
                    cons.map.eval(&xs[k], &us[k]) + s.c_hard[i] * sv(r, k)
                }
                Tag::TubeCap { k } => {
                    for (i, cf) in self.s_terms(r, k) {
                        g[i] += cf;
                    }
                    sv(r, k) - s.s_bar
                }
                Tag::BoundOrder { k, level } => {
                    g[l.w(level, k)] += 1.0;
                    g[l.w(r, k)] -= 1.0;
                    z[l.w(level, k)] - z[l.w(r, k)]
                }
                Tag::BoundCap { k } => {
                    let t = s.terminal.as_ref().expect("cap only with terminal design");
                    g[l.w(r, k)] += 1.0;
                    z[l.w(r, k)] - t.w_bar
                }
                Tag::TerminalState => {
                    let t = s.terminal.as_ref().expect("terminal tag without design");
                    let px = &t.p_f * &xs[n_h];
                    for i in 0..l.n {
                        g[l.x(n_h) + i] += 2.0 * px[i];
                    }
                    xs[n_h].dot(&px) - t.gamma_f
                }
                Tag::TerminalTube => {
                    let t = s.terminal.as_ref().expect("terminal tag without design");
                    for (i, cf) in self.s_terms(r, n_h) {
                        g[i] += cf;
                    }
                    sv(r, n_h) - t.s_f
                }
                _ => unreachable!("equality tag in inequality list"),
            };
            ci[row] = val;
            ji.row_mut(row).copy_from_slice(&g);
        }
        Evaluation {
            z: z.clone(),
            ce,
            je,
            ci,
            ji,
        }
    }

    /// Plain-text listing of variables and constraints with their indices.
    pub fn export_text(&self) -> String {
        let l = &self.layout;
        let mut out = String::new();
        let _ = writeln!(out, "# optimal control problem");
        let _ = writeln!(
            out,
            "horizon = {}\nlevels = {:?}\nvariables = {}\nequalities = {}\ninequalities = {}",
            l.horizon,
            self.setup.levels,
            l.len(),
            self.eq_tags.len(),
            self.in_tags.len()
        );
        let _ = writeln!(out, "x0 = {:?}", self.x0.as_slice());
        let _ = writeln!(out, "\n[variables]");
        let mut names = vec![String::new(); l.len()];
        for k in 0..l.n_inputs() {
            for j in 0..l.m {
                names[l.u(k) + j] = format!("u[{k}][{j}]");
            }
        }
        for k in 1..=l.horizon {
            for i in 0..l.n {
                names[l.x(k) + i] = format!("x[{k}][{i}]");
            }
            for lv in 0..l.n_levels {
                if let Some(i) = l.s(lv, k) {
                    names[i] = format!("s[p={}][{k}]", self.setup.levels[lv]);
                }
                names[l.w(lv, k - 1)] = format!("w[p={}][{}]", self.setup.levels[lv], k - 1);
            }
        }
        for (i, name) in names.iter().enumerate() {
            let _ = writeln!(out, "{i:4} {name}");
        }
        let _ = writeln!(out, "\n[equalities]");
        for (i, t) in self.eq_tags.iter().enumerate() {
            let _ = writeln!(out, "{i:4} {t:?} = 0");
        }
        let _ = writeln!(out, "\n[inequalities]");
        for (i, t) in self.in_tags.iter().enumerate() {
            let _ = writeln!(out, "{i:4} {t:?} <= 0");
        }
        out
    }
}

impl NlpProblem for BoundOcp<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn n_eq(&self) -> usize {
        self.eq_tags.len()
    }

    fn n_ineq(&self) -> usize {
        self.in_tags.len()
    }

    fn objective(&self, z: &Vector) -> f64 {
        let s = self.setup;
        let n_h = self.layout.horizon;
        let mut j = 0.0;
        for k in 0..n_h {
            j += s.cost.stage(&self.state(z, k), &self.input(z, k));
        }
        j += s.cost.terminal_cost(&self.state(z, n_h));
        j
    }

    fn gradient(&self, z: &Vector) -> Vector {
        let s = self.setup;
        let l = &self.layout;
        let mut g = Vector::zeros(l.len());
        for k in 0..l.horizon {
            let gu = (&s.cost.r + s.cost.r.transpose()) * self.input(z, k);
            g.rows_mut(l.u(k), l.m).add_assign(&gu);
            if k >= 1 {
                let gx = (&s.cost.q + s.cost.q.transpose()) * self.state(z, k);
                g.rows_mut(l.x(k), l.n).add_assign(&gx);
            }
        }
        if let Some(pf) = &s.cost.terminal {
            let gx = (pf + pf.transpose()) * self.state(z, l.horizon);
            g.rows_mut(l.x(l.horizon), l.n).add_assign(&gx);
        }
        g
    }

    fn hessian_hint(&self, _z: &Vector) -> Option<Matrix> {
        let s = self.setup;
        let l = &self.layout;
        let mut h = Matrix::zeros(l.len(), l.len());
        let r2 = &s.cost.r + s.cost.r.transpose();
        let q2 = &s.cost.q + s.cost.q.transpose();
        for k in 0..l.horizon {
            h.view_mut((l.u(k), l.u(k)), (l.m, l.m)).add_assign(&r2);
            if k >= 1 {
                h.view_mut((l.x(k), l.x(k)), (l.n, l.n)).add_assign(&q2);
            }
        }
        if let Some(pf) = &s.cost.terminal {
            let p2 = pf + pf.transpose();
            h.view_mut((l.x(l.horizon), l.x(l.horizon)), (l.n, l.n)).add_assign(&p2);
        }
        Some(h)
    }

    fn eq(&self, z: &Vector) -> Vector {
        self.evaluate(z).ce.clone()
    }

    fn eq_jacobian(&self, z: &Vector) -> Matrix {
        self.evaluate(z).je.clone()
    }

    fn ineq(&self, z: &Vector) -> Vector {
        self.evaluate(z).ci.clone()
    }

    fn ineq_jacobian(&self, z: &Vector) -> Matrix {
        self.evaluate(z).ji.clone()
    }

    fn initial_guess(&self) -> Vector {
        self.guess.clone()
    }
}

use std::ops::AddAssign;

/// Sample counts and seed for the terminal check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalCheckSpec {
    pub count: usize,
    pub seed: u64,
}

/// Sampled check of the terminal conditions: cost decrease, invariance of
/// `𝒳_f` under disturbed successors, the `w̄` bound, tightened hard and chance
/// constraints (with `β^p = ρs − ρ^N w + w̃^p(x, k_f(x), s)`) and `s ≤ s̄`.
/// Each outcome reports the largest violation (`≤ 0` passes).
pub fn terminal_check(setup: &OcpSetup, w_bar_min: f64, spec: TerminalCheckSpec) -> Result<Vec<CheckOutcome>> {
    let Some(t) = &setup.terminal else {
        return Ok(vec![CheckOutcome::skipped("terminal", "terminal ingredients disabled")]);
    };
    if spec.count == 0 {
        return Err(Error::Usage("terminal check needs at least one sample".into()));
    }
    let n = setup.model.n();
    let rho = setup.design.rho;
    let rho_n = rho.powi(setup.horizon() as i32);
    let pf_inv_sqrt = crate::linalg::sym_sqrt(&t.p_f)?
        .try_inverse()
        .ok_or_else(|| Error::Config("terminal P_f is singular".into()))?;
    let r = setup.robust();
    let w_lo = w_bar_min.min(t.w_bar);
    // 0: cost decrease, 1: invariance, 2: w̄, 3: hard, 4: chance, 5: s ≤ s̄
    let worst = par_sample(spec.seed, spec.count, |rng: &mut Rng64| {
        let mut out = [f64::NEG_INFINITY; 6];
        let x = if rand::Rng::random::<f64>(rng) < 0.05 {
            Vector::zeros(n)
        } else {
            &pf_inv_sqrt * unit_ball(rng, n) * t.gamma_f.sqrt()
        };
        let s = t.s_f * rand::Rng::random::<f64>(rng);
        let w = w_lo + (t.w_bar - w_lo) * rand::Rng::random::<f64>(rng);
        let u = t.control(&x);
        let xp = setup.model.f(&x, &u);
        out[0] = t.cost(&xp) + setup.cost.stage(&x, &u) - t.cost(&x);
        let wt1 = setup.w_tilde(r, &x, &u, s);
        let s_plus_max = rho * s - rho_n * w + wt1;
        if s_plus_max >= 0.0 {
            let d = setup.design.sample_on_tube(rng, &Vector::zeros(n), rho_n * w);
            let xd = &xp + d;
            out[1] = (t.cost(&xd) - t.gamma_f).max(s_plus_max - t.s_f);
        }
        out[2] = wt1 - t.w_bar;
        for (i, h) in setup.constraints.hard.iter().enumerate() {
            out[3] = out[3].max(h.map.eval(&x, &u) + setup.c_hard[i] * s);
        }
        let up = t.control(&xp);
        for (j, c) in setup.constraints.chance.iter().enumerate() {
            let level = setup.chance_level[j];
            let beta = rho * s - rho_n * w + setup.w_tilde(level, &x, &u, s);
            out[4] = out[4].max(c.map.eval(&xp, &up) + setup.c_chance[j] * beta);
        }
        out[5] = s - setup.s_bar;
        out
    });
    let names = [
        "terminal-cost-decrease",
        "terminal-invariance",
        "terminal-w-bar",
        "terminal-hard",
        "terminal-chance",
        "terminal-s-bar",
    ];
    Ok(names
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let v = worst.iter().map(|o| o[idx]).fold(f64::NEG_INFINITY, f64::max);
            let v = if v == f64::NEG_INFINITY { 0.0 } else { v };
            CheckOutcome::at_most(*name, spec.count, v, 1e-12)
        })
        .collect())
}
