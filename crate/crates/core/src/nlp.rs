//! Dense SQP solver for small smooth nonlinear programs.
//!
//! Each iteration solves a convex QP built from a damped-BFGS Hessian model and
//! the constraint linearization, then does an ℓ1-merit backtracking line search
//! with a second-order correction. When the linearization is inconsistent an
//! elastic QP is solved instead; its penalty grows until the constraints are
//! met or it diverges, which is reported as infeasibility.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};
use crate::qp::{solve_qp, QpProblem, QpSolution, QpStatus};

/// `min f(x)  s.t.  c_eq(x) = 0,  c_in(x) ≤ 0,  lower ≤ x ≤ upper`.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn objective(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    /// Optional objective Hessian used to seed the quasi-Newton model.
    fn hessian_hint(&self, _x: &Vector) -> Option<Matrix> {
        None
    }
    fn eq(&self, x: &Vector) -> Vector;
    fn eq_jacobian(&self, x: &Vector) -> Matrix;
    fn ineq(&self, x: &Vector) -> Vector;
    fn ineq_jacobian(&self, x: &Vector) -> Matrix;
    /// Variable bounds; infinite entries are ignored.
    fn bounds(&self) -> (Vector, Vector) {
        let n = self.dim();
        (
            Vector::from_element(n, f64::NEG_INFINITY),
            Vector::from_element(n, f64::INFINITY),
        )
    }
    fn initial_guess(&self) -> Vector;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Factor by which the elastic penalty grows while the linearization
    /// stays inconsistent.
    pub penalty_growth: f64,
    /// Elastic penalty beyond which the problem is declared infeasible.
    pub max_penalty: f64,
    /// Step for finite-difference derivative fallbacks and checks.
    pub fd_step: f64,
    /// Diagonal added to the initial Hessian model.
    pub hessian_reg: f64,
    /// Compare analytic Jacobians with finite differences at the start.
    pub check_derivatives: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            kkt_tol: 1e-6,
            max_iter: 200,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            fd_step: 1e-6,
            hessian_reg: 1e-2,
            check_derivatives: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Solved,
    Infeasible,
    MaxIterations,
    Unbounded,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Solved => "solved",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::Unbounded => "unbounded",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Multipliers {
    pub eq: Vector,
    pub ineq: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vector,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Largest relative Jacobian mismatch when `check_derivatives` is set.
    pub derivative_error: Option<f64>,
}

/// Optimality measures at a primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktMeasures {
    pub stationarity: f64,
    pub violation: f64,
    pub dual_sign: f64,
    pub complementarity: f64,
}

impl KktMeasures {
    pub fn residual(&self) -> f64 {
        self.stationarity
            .max(self.violation)
            .max(self.dual_sign)
            .max(self.complementarity)
    }
}

/// Evaluates the KKT conditions from scratch at `(x, multipliers)`.
pub fn kkt_measures(p: &dyn NlpProblem, x: &Vector, mult: &Multipliers) -> KktMeasures {
    let g = p.gradient(x);
    let ce = p.eq(x);
    let ci = p.ineq(x);
    let mut stat = g;
    if !ce.is_empty() {
        stat += p.eq_jacobian(x).transpose() * &mult.eq;
    }
    if !ci.is_empty() {
        stat += p.ineq_jacobian(x).transpose() * &mult.ineq;
    }
    stat += &mult.upper - &mult.lower;
    let (lo, hi) = p.bounds();
    let mut viol: f64 = if !ce.is_empty() { ce.amax() } else { 0.0 };
    let mut sign: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..ci.len() {
        viol = viol.max(ci[i].max(0.0));
        sign = sign.max(-mult.ineq[i]);
        comp = comp.max((mult.ineq[i] * ci[i]).abs());
    }
    for i in 0..x.len() {
        viol = viol.max(lo[i] - x[i]).max(x[i] - hi[i]);
        sign = sign.max(-mult.lower[i]).max(-mult.upper[i]);
        if lo[i].is_finite() {
            comp = comp.max((mult.lower[i] * (x[i] - lo[i])).abs());
        }
        if hi[i].is_finite() {
            comp = comp.max((mult.upper[i] * (hi[i] - x[i])).abs());
        }
    }
    KktMeasures {
        stationarity: stat.amax(),
        violation: viol.max(0.0),
        dual_sign: sign.max(0.0),
        complementarity: comp,
    }
}

/// Largest relative mismatch between analytic and central-difference
/// Jacobians (objective gradient included).
pub fn derivative_mismatch(p: &dyn NlpProblem, x: &Vector, h: f64) -> f64 {
    let n = p.dim();
    let je = p.eq_jacobian(x);
    let ji = p.ineq_jacobian(x);
    let g = p.gradient(x);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let dfe = (p.eq(&xp) - p.eq(&xm)) / (2.0 * h);
        let dfi = (p.ineq(&xp) - p.ineq(&xm)) / (2.0 * h);
        let dfo = (p.objective(&xp) - p.objective(&xm)) / (2.0 * h);
        for r in 0..dfe.len() {
            worst = worst.max(rel(je[(r, j)], dfe[r]));
        }
        for r in 0..dfi.len() {
            worst = worst.max(rel(ji[(r, j)], dfi[r]));
        }
        worst = worst.max(rel(g[j], dfo));
    }
    worst
}

struct Linearization {
    f: f64,
    g: Vector,
    ce: Vector,
    je: Matrix,
    ci: Vector,
    ji: Matrix,
}

impl Linearization {
    fn at(p: &dyn NlpProblem, x: &Vector) -> Self {
        Linearization {
            f: p.objective(x),
            g: p.gradient(x),
            ce: p.eq(x),
            je: p.eq_jacobian(x),
            ci: p.ineq(x),
            ji: p.ineq_jacobian(x),
        }
    }

    fn infeasibility(&self) -> f64 {
        l1_violation(&self.ce, &self.ci)
    }
}

fn l1_violation(ce: &Vector, ci: &Vector) -> f64 {
    ce.iter().map(|v| v.abs()).sum::<f64>() + ci.iter().map(|v| v.max(0.0)).sum::<f64>()
}

/// Finite variable bounds as QP rows `±d_i ≤ …`.
struct BoundRows {
    /// `(variable, is_upper, bound)`
    rows: Vec<(usize, bool, f64)>,
}

impl BoundRows {
    fn new(lo: &Vector, hi: &Vector) -> Self {
        let mut rows = Vec::new();
        for i in 0..lo.len() {
            if lo[i].is_finite() {
                rows.push((i, false, lo[i]));
            }
            if hi[i].is_finite() {
                rows.push((i, true, hi[i]));
            }
        }
        BoundRows { rows }
    }

    fn split(&self, n: usize, lambda: &[f64]) -> (Vector, Vector) {
        let mut lo = Vector::zeros(n);
        let mut hi = Vector::zeros(n);
        for (&(i, upper, _), &l) in self.rows.iter().zip(lambda) {
            if upper {
                hi[i] += l;
            } else {
                lo[i] += l;
            }
        }
        (lo, hi)
    }
}

/// Assembles and solves the (optionally elastic) QP subproblem at `x`.
struct Subproblem<'a> {
    lin: &'a Linearization,
    bounds: &'a BoundRows,
    x: &'a Vector,
}

struct Step {
    d: Vector,
    mult: Multipliers,
    /// ℓ1 norm of elastic slacks (0 for a regular QP step).
    slack: f64,
}

impl Subproblem<'_> {
    fn rows(&self, n: usize, extra: usize) -> (Matrix, Vector) {
        let lin = self.lin;
        let mi = lin.ci.len();
        let nb = self.bounds.rows.len();
        let mut a = Matrix::zeros(mi + nb, n + extra);
        let mut b = Vector::zeros(mi + nb);
        if mi > 0 {
            a.view_mut((0, 0), (mi, n)).copy_from(&lin.ji);
            b.rows_mut(0, mi).copy_from(&(-&lin.ci));
        }
        for (k, &(i, upper, bound)) in self.bounds.rows.iter().enumerate() {
            if upper {
                a[(mi + k, i)] = 1.0;
                b[mi + k] = bound - self.x[i];
            } else {
                a[(mi + k, i)] = -1.0;
                b[mi + k] = self.x[i] - bound;
            }
        }
        (a, b)
    }

    fn regular(&self, h: &Matrix, ce: &Vector, ci: &Vector) -> QpSolution {
        let lin = self.lin;
        let n = lin.g.len();
        let (a_in, mut b_in) = self.rows(n, 0);
        let mi = ci.len();
        b_in.rows_mut(0, mi).copy_from(&(-ci));
        let b_eq = -ce;
        solve_qp(&QpProblem {
            h,
            c: &lin.g,
            a_eq: &lin.je,
            b_eq: &b_eq,
            a_in: &a_in,
            b_in: &b_in,
        })
    }

    /// Elastic QP: equalities relaxed by `v⁺ − v⁻`, inequalities by `t`, all
    /// slacks penalized linearly with weight `nu`.
    fn elastic(&self, h: &Matrix, nu: f64) -> QpSolution {
        let lin = self.lin;
        let n = lin.g.len();
        let me = lin.ce.len();
        let mi = lin.ci.len();
        let ns = 2 * me + mi;
        let nt = n + ns;
        let mut hh = Matrix::zeros(nt, nt);
        hh.view_mut((0, 0), (n, n)).copy_from(h);
        // Small curvature on the slacks keeps the QP strictly convex; scaling
        // it with the penalty keeps the unconstrained minimizer moderate.
        for k in n..nt {
            hh[(k, k)] = 1e-3 * nu;
        }
        let mut c = Vector::from_element(nt, nu);
        c.rows_mut(0, n).copy_from(&lin.g);
        let mut a_eq = Matrix::zeros(me, nt);
        if me > 0 {
            a_eq.view_mut((0, 0), (me, n)).copy_from(&lin.je);
        }
        for r in 0..me {
            a_eq[(r, n + r)] = -1.0;
            a_eq[(r, n + me + r)] = 1.0;
        }
        let b_eq = -&lin.ce;
        let (rows, b_rows) = self.rows(n, ns);
        let mut a_in = Matrix::zeros(rows.nrows() + ns, nt);
        let mut b_in = Vector::zeros(rows.nrows() + ns);
        a_in.view_mut((0, 0), (rows.nrows(), nt)).copy_from(&rows);
        b_in.rows_mut(0, rows.nrows()).copy_from(&b_rows);
        for r in 0..mi {
            a_in[(r, n + 2 * me + r)] = -1.0;
        }
        for k in 0..ns {
            a_in[(rows.nrows() + k, n + k)] = -1.0;
        }
        solve_qp(&QpProblem {
            h: &hh,
            c: &c,
            a_eq: &a_eq,
            b_eq: &b_eq,
            a_in: &a_in,
            b_in: &b_in,
        })
    }

    fn step_from(&self, qp: &QpSolution, n: usize, elastic: bool) -> Step {
        let lin = self.lin;
        let mi = lin.ci.len();
        let d = qp.x.rows(0, n).into_owned();
        let slack = if elastic { qp.x.rows(n, qp.x.len() - n).iter().map(|v| v.max(0.0)).sum() } else { 0.0 };
        let lambda: Vec<f64> = qp.lambda.iter().skip(mi).take(self.bounds.rows.len()).copied().collect();
        let (lower, upper) = self.bounds.split(n, &lambda);
        Step {
            d,
            mult: Multipliers {
                eq: qp.mu.clone(),
                ineq: qp.lambda.rows(0, mi).into_owned(),
                lower,
                upper,
            },
            slack,
        }
    }
}

fn lagrangian_gradient(lin: &Linearization, mult: &Multipliers) -> Vector {
    let mut g = lin.g.clone();
    if !lin.ce.is_empty() {
        g += lin.je.transpose() * &mult.eq;
    }
    if !lin.ci.is_empty() {
        g += lin.ji.transpose() * &mult.ineq;
    }
    g + &mult.upper - &mult.lower
}

fn initial_hessian(p: &dyn NlpProblem, x: &Vector, reg: f64) -> Matrix {
    let n = x.len();
    let mut b = match p.hessian_hint(x) {
        Some(h) if h.nrows() == n && h.ncols() == n => (&h + h.transpose()) * 0.5,
        _ => Matrix::zeros(n, n),
    };
    for i in 0..n {
        b[(i, i)] += reg;
    }
    if nalgebra::Cholesky::new(b.clone()).is_none() {
        b = Matrix::identity(n, n);
    }
    b
}

/// Powell-damped BFGS update keeping `B` positive definite.
fn bfgs_update(b: &mut Matrix, s: &Vector, y: &Vector) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-16) {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if !(sr > 1e-16) {
        return;
    }
    b.ger(1.0 / sr, &r, &r, 1.0);
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    let sym = (&*b + b.transpose()) * 0.5;
    *b = sym;
}

/// Solves from the problem's initial guess.
pub fn solve(p: &dyn NlpProblem, opts: &SolveOptions) -> SolveReport {
    solve_from(p, p.initial_guess(), opts)
}

pub fn solve_from(p: &dyn NlpProblem, x0: Vector, opts: &SolveOptions) -> SolveReport {
    let n = p.dim();
    let (lo, hi) = p.bounds();
    let mut x = x0;
    for i in 0..n {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
    let derivative_error = opts
        .check_derivatives
        .then(|| derivative_mismatch(p, &x, opts.fd_step));
    let bounds = BoundRows::new(&lo, &hi);
    let mut b = initial_hessian(p, &x, opts.hessian_reg);
    let mut lin = Linearization::at(p, &x);
    let mut nu: f64 = 1.0;
    let mut nu_elastic: f64 = 1e2;
    let mut mult = Multipliers {
        eq: Vector::zeros(p.n_eq()),
        ineq: Vector::zeros(p.n_ineq()),
        lower: Vector::zeros(n),
        upper: Vector::zeros(n),
    };
    let mut best: Option<(f64, Vector, Multipliers)> = None;
    let mut resets = 0;
    let mut elastic = false;

    let report = |x: Vector, mult: Multipliers, status: SolveStatus, it: usize| {
        let m = kkt_measures(p, &x, &mult);
        SolveReport {
            objective: p.objective(&x),
            kkt_residual: m.residual(),
            violation: m.violation,
            x,
            multipliers: mult,
            iterations: it,
            status,
            derivative_error,
        }
    };

    for it in 1..=opts.max_iter {
        if !lin.f.is_finite() || lin.f < -1e20 {
            return report(x, mult, SolveStatus::Unbounded, it);
        }
        let sub = Subproblem {
            lin: &lin,
            bounds: &bounds,
            x: &x,
        };
        let mut qp = sub.regular(&b, &lin.ce, &lin.ci);
        if qp.status == QpStatus::NotConvex {
            b = Matrix::identity(n, n);
            qp = sub.regular(&b, &lin.ce, &lin.ci);
        }
        if qp.status != QpStatus::Optimal {
            elastic = true;
        }
        let step = if elastic {
            let eqp = sub.elastic(&b, nu_elastic);
            if eqp.status != QpStatus::Optimal {
                debug!("elastic QP failed with {:?}", eqp.status);
                return report(x, mult, SolveStatus::Infeasible, it);
            }
            let st = sub.step_from(&eqp, n, true);
            // The linearized infeasibility cannot be reduced: raise the
            // penalty, and give up once it diverges.
            let infeas = lin.infeasibility();
            if st.slack > opts.kkt_tol && infeas - st.slack <= 1e-4 * infeas.max(1.0) {
                nu_elastic *= opts.penalty_growth;
                if nu_elastic > opts.max_penalty {
                    debug!("elastic penalty diverged at iteration {it}");
                    return report(x, st.mult, SolveStatus::Infeasible, it);
                }
            }
            st
        } else {
            sub.step_from(&qp, n, false)
        };
        mult = step.mult.clone();
        let m = kkt_measures(p, &x, &mult);
        let res = m.residual();
        if best.as_ref().is_none_or(|(r, _, _)| res < *r) {
            best = Some((res, x.clone(), mult.clone()));
        }
        if res <= opts.kkt_tol && m.violation <= opts.kkt_tol {
            return report(x, mult, SolveStatus::Solved, it);
        }
        let d = step.d;
        if d.amax() > 1e15 {
            return report(x, mult, SolveStatus::Unbounded, it);
        }

        let lam_max = mult.eq.amax().max(mult.ineq.amax());
        if nu < 1.1 * lam_max {
            nu = (1.5 * lam_max).max(nu);
        }
        if step.slack > 0.0 {
            nu = nu.max(nu_elastic);
        }
        let phi = |f: f64, ce: &Vector, ci: &Vector| f + nu * l1_violation(ce, ci);
        let phi0 = phi(lin.f, &lin.ce, &lin.ci);
        let mut dphi = lin.g.dot(&d) - nu * (lin.infeasibility() - step.slack);
        if !(dphi < 0.0) {
            dphi = -1e-12 * (1.0 + d.norm_squared());
        }

        let trial = |z: &Vector| {
            let f = p.objective(z);
            let ce = p.eq(z);
            let ci = p.ineq(z);
            phi(f, &ce, &ci)
        };
        let mut x_new = None;
        let xf = &x + &d;
        let phi_full = trial(&xf);
        if phi_full <= phi0 + 1e-4 * dphi {
            x_new = Some(xf);
        } else if step.slack == 0.0 {
            // Second-order correction of the constraint values.
            let ce_t = p.eq(&xf) - &lin.je * &d;
            let ci_t = p.ineq(&xf) - &lin.ji * &d;
            let soc = sub.regular(&b, &ce_t, &ci_t);
            if soc.status == QpStatus::Optimal {
                let xs = &x + soc.x.rows(0, n);
                let inside = (0..n).all(|i| xs[i] >= lo[i] && xs[i] <= hi[i]);
                if inside && trial(&xs) <= phi0 + 1e-4 * dphi {
                    x_new = Some(xs);
                }
            }
        }
        if x_new.is_none() {
            let mut alpha = 0.5;
            while alpha > 1e-10 {
                let xa = &x + &d * alpha;
                if trial(&xa) <= phi0 + 1e-4 * alpha * dphi {
                    x_new = Some(xa);
                    break;
                }
                alpha *= 0.5;
            }
        }
        let Some(x_next) = x_new else {
            if !elastic && lin.infeasibility() > opts.kkt_tol {
                elastic = true;
                continue;
            }
            resets += 1;
            if resets > 5 {
                break;
            }
            b = initial_hessian(p, &x, opts.hessian_reg);
            continue;
        };
        let lin_next = Linearization::at(p, &x_next);
        let s = &x_next - &x;
        let y = lagrangian_gradient(&lin_next, &mult) - lagrangian_gradient(&lin, &mult);
        bfgs_update(&mut b, &s, &y);
        x = x_next;
        lin = lin_next;
        if elastic && lin.infeasibility() <= opts.kkt_tol {
            elastic = false;
        }
    }
    let (_, xb, mb) = best.unwrap_or((f64::INFINITY, x, mult));
    report(xb, mb, SolveStatus::MaxIterations, opts.max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Generic test problem from closures.
    struct Fn2 {
        n: usize,
        f: fn(&Vector) -> f64,
        g: fn(&Vector) -> Vector,
        ce: fn(&Vector) -> Vector,
        je: fn(&Vector) -> Matrix,
        ci: fn(&Vector) -> Vector,
        ji: fn(&Vector) -> Matrix,
        lo: Vec<f64>,
        hi: Vec<f64>,
        x0: Vec<f64>,
    }

    impl NlpProblem for Fn2 {
        fn dim(&self) -> usize {
            self.n
        }
        fn n_eq(&self) -> usize {
            (self.ce)(&Vector::zeros(self.n)).len()
        }
        fn n_ineq(&self) -> usize {
            (self.ci)(&Vector::zeros(self.n)).len()
        }
        fn objective(&self, x: &Vector) -> f64 {
            (self.f)(x)
        }
        fn gradient(&self, x: &Vector) -> Vector {
            (self.g)(x)
        }
        fn eq(&self, x: &Vector) -> Vector {
            (self.ce)(x)
        }
        fn eq_jacobian(&self, x: &Vector) -> Matrix {
            (self.je)(x)
        }
        fn ineq(&self, x: &Vector) -> Vector {
            (self.ci)(x)
        }
        fn ineq_jacobian(&self, x: &Vector) -> Matrix {
            (self.ji)(x)
        }
        fn bounds(&self) -> (Vector, Vector) {
            (Vector::from_row_slice(&self.lo), Vector::from_row_slice(&self.hi))
        }
        fn initial_guess(&self) -> Vector {
            Vector::from_row_slice(&self.x0)
        }
    }

    fn none_v(_: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn none_1(_: &Vector) -> Matrix {
        Matrix::zeros(0, 1)
    }
    fn none_2(_: &Vector) -> Matrix {
        Matrix::zeros(0, 2)
    }

    #[test]
    fn scalar_with_lower_bound() {
        let p = Fn2 {
            n: 1,
            f: |x| x[0] * x[0],
            g: |x| Vector::from_element(1, 2.0 * x[0]),
            ce: none_v,
            je: none_1,
            ci: |x| Vector::from_element(1, 1.0 - x[0]),
            ji: |_| Matrix::from_element(1, 1, -1.0),
            lo: vec![f64::NEG_INFINITY],
            hi: vec![f64::INFINITY],
            x0: vec![3.0],
        };
        let r = solve(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Solved);
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        assert!((r.multipliers.ineq[0] - 2.0).abs() < 1e-6);
        assert!(r.kkt_residual <= 1e-6);
    }

    #[test]
    fn projection_onto_line() {
        let p = Fn2 {
            n: 2,
            f: |x| (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2),
            g: |x| Vector::from_row_slice(&[2.0 * (x[0] - 2.0), 2.0 * (x[1] - 1.0)]),
            ce: |x| Vector::from_element(1, x[0] + x[1] - 1.0),
            je: |_| Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            ci: none_v,
            ji: none_2,
            lo: vec![f64::NEG_INFINITY; 2],
            hi: vec![f64::INFINITY; 2],
            x0: vec![0.0, 0.0],
        };
        let r = solve(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Solved);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && r.x[1].abs() < 1e-8);
    }

    fn rosen_f(x: &Vector) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn rosenbrock_in_box() {
        let p = Fn2 {
            n: 2,
            f: rosen_f,
            g: |x| {
                Vector::from_row_slice(&[
                    -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                    200.0 * (x[1] - x[0] * x[0]),
                ])
            },
            ce: none_v,
            je: none_2,
            ci: none_v,
            ji: none_2,
            lo: vec![-2.0, -1.0],
            hi: vec![2.0, 3.0],
            x0: vec![-1.2, 1.0],
        };
        let r = solve(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Solved, "{r:?}");
        // Independent oracle: coarse grid search, then local grid refinement.
        let (mut cx, mut cy) = (0.0, 0.0);
        let mut best = f64::INFINITY;
        let mut span = (4.0, 4.0);
        let mut center = (0.0, 1.0);
        for _ in 0..30 {
            for i in 0..=40 {
                for j in 0..=40 {
                    let x = (center.0 - span.0 / 2.0 + span.0 * i as f64 / 40.0).clamp(-2.0, 2.0);
                    let y = (center.1 - span.1 / 2.0 + span.1 * j as f64 / 40.0).clamp(-1.0, 3.0);
                    let v = rosen_f(&Vector::from_row_slice(&[x, y]));
                    if v < best {
                        best = v;
                        cx = x;
                        cy = y;
                    }
                }
            }
            center = (cx, cy);
            span = (span.0 * 0.5, span.1 * 0.5);
        }
        assert!((cx - 1.0).abs() < 1e-5 && (cy - 1.0).abs() < 1e-5);
        assert!((r.x[0] - cx).abs() < 1e-5 && (r.x[1] - cy).abs() < 1e-5);
    }

    #[test]
    fn reports_infeasibility() {
        // x² + 1 = 0 has no real solution.
        let p = Fn2 {
            n: 1,
            f: |x| x[0] * x[0],
            g: |x| Vector::from_element(1, 2.0 * x[0]),
            ce: |x| Vector::from_element(1, x[0] * x[0] + 1.0),
            je: |x| Matrix::from_element(1, 1, 2.0 * x[0]),
            ci: none_v,
            ji: none_1,
            lo: vec![f64::NEG_INFINITY],
            hi: vec![f64::INFINITY],
            x0: vec![1.0],
        };
        let r = solve(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Infeasible);
        // Contradictory linear inequalities.
        let p = Fn2 {
            n: 1,
            f: |x| x[0] * x[0],
            g: |x| Vector::from_element(1, 2.0 * x[0]),
            ce: none_v,
            je: none_1,
            ci: |x| Vector::from_row_slice(&[x[0] - 1.0, 2.0 - x[0]]),
            ji: |_| Matrix::from_row_slice(2, 1, &[1.0, -1.0]),
            lo: vec![f64::NEG_INFINITY],
            hi: vec![f64::INFINITY],
            x0: vec![0.0],
        };
        assert_eq!(solve(&p, &SolveOptions::default()).status, SolveStatus::Infeasible);
    }

    #[test]
    fn nonlinear_constraints_and_derivative_check() {
        // min −x − y s.t. x² + y² ≤ 1 → (1/√2, 1/√2)
        let p = Fn2 {
            n: 2,
            f: |x| -x[0] - x[1],
            g: |_| Vector::from_row_slice(&[-1.0, -1.0]),
            ce: none_v,
            je: none_2,
            ci: |x| Vector::from_element(1, x[0] * x[0] + x[1] * x[1] - 1.0),
            ji: |x| Matrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]),
            lo: vec![f64::NEG_INFINITY; 2],
            hi: vec![f64::INFINITY; 2],
            x0: vec![0.1, -0.3],
        };
        let opts = SolveOptions {
            check_derivatives: true,
            ..SolveOptions::default()
        };
        let r = solve(&p, &opts);
        assert_eq!(r.status, SolveStatus::Solved);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.x[0] - h).abs() < 1e-7 && (r.x[1] - h).abs() < 1e-7);
        assert!(r.derivative_error.unwrap() < 1e-4);
        let m = kkt_measures(&p, &r.x, &r.multipliers);
        assert!(m.residual() <= 1e-6);
    }

    #[test]
    fn deterministic_iterates() {
        let p = Fn2 {
            n: 2,
            f: rosen_f,
            g: |x| {
                Vector::from_row_slice(&[
                    -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                    200.0 * (x[1] - x[0] * x[0]),
                ])
            },
            ce: none_v,
            je: none_2,
            ci: |x| Vector::from_element(1, x[0] + x[1] - 1.5),
            ji: |_| Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            lo: vec![-2.0, -2.0],
            hi: vec![2.0, 2.0],
            x0: vec![-1.0, 0.5],
        };
        let a = solve(&p, &SolveOptions::default());
        let b = solve(&p, &SolveOptions::default());
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.status, SolveStatus::Solved);
    }
}
