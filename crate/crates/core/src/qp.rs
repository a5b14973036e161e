//! Dense strictly convex QP solver, dual active-set method of Goldfarb and
//! Idnani with Givens updates of the factors `J = L⁻ᵀQ` and `R`.
//!
//! Solves `min ½xᵀHx + cᵀx  s.t.  A_eq x = b_eq,  A_in x ≤ b_in` with `H`
//! symmetric positive definite. Multipliers follow the convention
//! `Hx + c + A_eqᵀμ + A_inᵀλ = 0`, `λ ≥ 0`.

use nalgebra::Cholesky;

use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// `H` is not numerically positive definite.
    NotConvex,
    /// Equality constraints are linearly dependent.
    Degenerate,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vector,
    pub mu: Vector,
    pub lambda: Vector,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpProblem<'a> {
    pub h: &'a Matrix,
    pub c: &'a Vector,
    pub a_eq: &'a Matrix,
    pub b_eq: &'a Vector,
    pub a_in: &'a Matrix,
    pub b_in: &'a Vector,
}

/// Active constraint: equality `i` or inequality `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Active {
    Eq(usize),
    In(usize),
}

struct Factors {
    j: Matrix,
    r: Matrix,
    r_norm: f64,
    iq: usize,
}

impl Factors {
    /// Appends `d = Jᵀnp` as a new column of `R`, rotating `J` so that
    /// `d[iq+1..]` vanishes. Returns `false` on linear dependence.
    fn add(&mut self, d: &mut Vector) -> bool {
        let n = d.len();
        let iq = self.iq;
        if iq >= n {
            return false;
        }
        for jj in (iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes active entry `qq`, restoring the triangular shape of `R`.
    fn remove(&mut self, active: &mut Vec<Active>, u: &mut Vec<f64>, qq: usize) {
        let n = self.j.nrows();
        active.remove(qq);
        u.remove(qq);
        for i in qq..self.iq - 1 {
            for row in 0..self.r.nrows() {
                self.r[(row, i)] = self.r[(row, i + 1)];
            }
        }
        for row in 0..self.r.nrows() {
            self.r[(row, self.iq - 1)] = 0.0;
        }
        self.iq -= 1;
        for jj in qq..self.iq {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..self.iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }

    /// `z = J₂ d₂` (primal step direction).
    fn z(&self, d: &Vector) -> Vector {
        let n = d.len();
        let mut z = Vector::zeros(n);
        for k in self.iq..n {
            let dk = d[k];
            if dk != 0.0 {
                z.axpy(dk, &self.j.column(k), 1.0);
            }
        }
        z
    }

    /// `r = R⁻¹ d₁` (dual step direction).
    fn r(&self, d: &Vector) -> Vector {
        let iq = self.iq;
        let mut r = Vector::zeros(iq);
        for i in (0..iq).rev() {
            let mut sum = d[i];
            for k in i + 1..iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        r
    }
}

/// Constraint violation accepted as satisfied, relative to the row scale.
fn violation_tol(p: &QpProblem<'_>, i: usize, x_scale: f64) -> f64 {
    let row = p.a_in.row(i);
    1e-12 * (1.0 + p.b_in[i].abs() + row.amax() * x_scale)
}

/// Solves the QP. Never panics on bad data; the status reports failures.
pub fn solve_qp(p: &QpProblem<'_>) -> QpSolution {
    let n = p.c.len();
    let me = p.b_eq.len();
    let mi = p.b_in.len();
    let fail = |status| QpSolution {
        status,
        x: Vector::zeros(n),
        mu: Vector::zeros(me),
        lambda: Vector::zeros(mi),
        objective: f64::NAN,
        iterations: 0,
    };
    if p.h.nrows() != n || p.h.ncols() != n {
        return fail(QpStatus::NotConvex);
    }
    let Some(chol) = Cholesky::new(p.h.clone()) else {
        return fail(QpStatus::NotConvex);
    };
    // J = L⁻ᵀ.
    let l = chol.l();
    let Some(linv) = l.clone().try_inverse() else {
        return fail(QpStatus::NotConvex);
    };
    let mut fac = Factors {
        j: linv.transpose(),
        r: Matrix::zeros(n, n),
        r_norm: 1.0,
        iq: 0,
    };

    let mut x = -chol.solve(p.c);
    let mut active: Vec<Active> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);

    // Normal vectors in the `nᵀx + b ≥ 0` form used by the dual method.
    let eq_normal = |i: usize| p.a_eq.row(i).transpose();
    let in_normal = |i: usize| -p.a_in.row(i).transpose();
    let in_slack = |i: usize, x: &Vector| p.b_in[i] - p.a_in.row(i).dot(&x.transpose());

    for i in 0..me {
        let np = eq_normal(i);
        let mut d = fac.j.transpose() * &np;
        let z = fac.z(&d);
        let r = fac.r(&d);
        let zn = z.dot(&np);
        let t2 = if z.norm_squared() > f64::EPSILON {
            (p.b_eq[i] - np.dot(&x)) / zn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for k in 0..fac.iq {
            u[k] -= t2 * r[k];
        }
        u.push(t2);
        active.push(Active::Eq(i));
        if !fac.add(&mut d) {
            return fail(QpStatus::Degenerate);
        }
    }

    let max_iter = 50 * (n + mi + me) + 100;
    let mut iterations = 0;
    let mut excluded = vec![false; mi];
    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return finish(p, x, &active, &u, QpStatus::MaxIterations, iterations);
        }
        let is_active = |i: usize, act: &[Active]| act.contains(&Active::In(i));
        let mut s: Vec<f64> = (0..mi).map(|i| in_slack(i, &x)).collect();
        excluded.iter_mut().for_each(|e| *e = false);
        let x_scale = 1.0 + x.amax();
        if (0..mi).all(|i| s[i] >= -violation_tol(p, i, x_scale)) {
            return finish(p, x, &active, &u, QpStatus::Optimal, iterations);
        }
        let saved = (x.clone(), active.clone(), u.clone());
        'select: loop {
            let mut ss: f64 = 0.0;
            let mut ip = usize::MAX;
            let x_scale = 1.0 + x.amax();
            for i in 0..mi {
                if s[i] < ss.min(-violation_tol(p, i, x_scale)) && !excluded[i] && !is_active(i, &active) {
                    ss = s[i];
                    ip = i;
                }
            }
            if ip == usize::MAX {
                return finish(p, x, &active, &u, QpStatus::Optimal, iterations);
            }
            let np = in_normal(ip);
            u.push(0.0);
            loop {
                iterations += 1;
                if iterations > max_iter {
                    u.pop();
                    return finish(p, x, &active, &u, QpStatus::MaxIterations, iterations);
                }
                let mut d = fac.j.transpose() * &np;
                let z = fac.z(&d);
                let r = fac.r(&d);
                // Largest dual step keeping active inequality multipliers ≥ 0.
                let mut t1 = f64::INFINITY;
                let mut drop = usize::MAX;
                for k in 0..fac.iq {
                    if matches!(active[k], Active::In(_)) && r[k] > 0.0 && u[k] / r[k] < t1 {
                        t1 = u[k] / r[k];
                        drop = k;
                    }
                }
                let zn = z.dot(&np);
                let t2 = if z.norm_squared() > f64::EPSILON && zn > 0.0 {
                    -s[ip] / zn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if t == f64::INFINITY {
                    return finish(p, x, &active, &u[..fac.iq], QpStatus::Infeasible, iterations);
                }
                let iq = fac.iq;
                if t2 == f64::INFINITY {
                    for k in 0..iq {
                        u[k] -= t * r[k];
                    }
                    u[iq] += t;
                    let last = u.pop().expect("candidate multiplier present");
                    fac.remove(&mut active, &mut u, drop);
                    u.push(last);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;
                if t == t2 {
                    active.push(Active::In(ip));
                    if !fac.add(&mut d) {
                        // Numerically dependent: exclude and restore.
                        excluded[ip] = true;
                        x = saved.0.clone();
                        active = saved.1.clone();
                        u = saved.2.clone();
                        refactor(p, &chol, &mut fac, &active);
                        s = (0..mi).map(|i| in_slack(i, &x)).collect();
                        continue 'select;
                    }
                    continue 'outer;
                }
                let last = u.pop().expect("candidate multiplier present");
                fac.remove(&mut active, &mut u, drop);
                u.push(last);
                s[ip] = in_slack(ip, &x);
            }
        }
    }
}

/// Rebuilds `J`, `R` from scratch for a given active set.
fn refactor(p: &QpProblem<'_>, chol: &Cholesky<f64, nalgebra::Dyn>, fac: &mut Factors, active: &[Active]) {
    let n = p.c.len();
    let linv = chol.l().try_inverse().expect("factor already inverted once");
    fac.j = linv.transpose();
    fac.r = Matrix::zeros(n, n);
    fac.iq = 0;
    fac.r_norm = 1.0;
    for a in active {
        let np = match *a {
            Active::Eq(i) => p.a_eq.row(i).transpose(),
            Active::In(i) => -p.a_in.row(i).transpose(),
        };
        let mut d = fac.j.transpose() * np;
        fac.add(&mut d);
    }
}

fn finish(
    p: &QpProblem<'_>,
    x: Vector,
    active: &[Active],
    u: &[f64],
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    let mut mu = Vector::zeros(p.b_eq.len());
    let mut lambda = Vector::zeros(p.b_in.len());
    for (a, &ui) in active.iter().zip(u) {
        match *a {
            Active::Eq(i) => mu[i] = -ui,
            Active::In(i) => lambda[i] = ui,
        }
    }
    let objective = 0.5 * x.dot(&(p.h * &x)) + p.c.dot(&x);
    QpSolution {
        status,
        x,
        mu,
        lambda,
        objective,
        iterations,
    }
}

/// Largest violation of stationarity, feasibility, sign and complementarity
/// conditions at a QP solution.
pub fn qp_kkt_residual(p: &QpProblem<'_>, s: &QpSolution) -> f64 {
    let stat = p.h * &s.x + p.c + p.a_eq.transpose() * &s.mu + p.a_in.transpose() * &s.lambda;
    let mut res = stat.amax();
    let eq = p.a_eq * &s.x - p.b_eq;
    if !eq.is_empty() {
        res = res.max(eq.amax());
    }
    let ineq = p.a_in * &s.x - p.b_in;
    for i in 0..ineq.len() {
        res = res.max(ineq[i].max(0.0));
        res = res.max((-s.lambda[i]).max(0.0));
        res = res.max((s.lambda[i] * ineq[i]).abs());
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{standard_normal, stream_rng};
    use rand::Rng;

    fn solve(
        h: &Matrix,
        c: &Vector,
        a_eq: &Matrix,
        b_eq: &Vector,
        a_in: &Matrix,
        b_in: &Vector,
    ) -> QpSolution {
        solve_qp(&QpProblem {
            h,
            c,
            a_eq,
            b_eq,
            a_in,
            b_in,
        })
    }

    #[test]
    fn unconstrained_minimum() {
        let h = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let c = Vector::from_row_slice(&[-2.0, -4.0]);
        let s = solve(&h, &c, &Matrix::zeros(0, 2), &Vector::zeros(0), &Matrix::zeros(0, 2), &Vector::zeros(0));
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bound_and_equality() {
        // min x² s.t. x ≥ 1  →  x = 1, λ = 2
        let h = Matrix::from_element(1, 1, 2.0);
        let c = Vector::zeros(1);
        let a_in = Matrix::from_element(1, 1, -1.0);
        let b_in = Vector::from_element(1, -1.0);
        let s = solve(&h, &c, &Matrix::zeros(0, 1), &Vector::zeros(0), &a_in, &b_in);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-14);
        assert!((s.lambda[0] - 2.0).abs() < 1e-14);
        // projection of (2, 1) onto x + y = 1 is (1, 0)
        let h = Matrix::identity(2, 2) * 2.0;
        let c = Vector::from_row_slice(&[-4.0, -2.0]);
        let a_eq = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b_eq = Vector::from_element(1, 1.0);
        let s = solve(&h, &c, &a_eq, &b_eq, &Matrix::zeros(0, 2), &Vector::zeros(0));
        assert!((s.x[0] - 1.0).abs() < 1e-14 && s.x[1].abs() < 1e-14);
        assert!(qp_kkt_residual(
            &QpProblem { h: &h, c: &c, a_eq: &a_eq, b_eq: &b_eq, a_in: &Matrix::zeros(0, 2), b_in: &Vector::zeros(0) },
            &s
        ) < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let h = Matrix::identity(1, 1);
        let c = Vector::zeros(1);
        let a_in = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b_in = Vector::from_row_slice(&[-1.0, -1.0]);
        let s = solve(&h, &c, &Matrix::zeros(0, 1), &Vector::zeros(0), &a_in, &b_in);
        assert_eq!(s.status, QpStatus::Infeasible);
        let a_eq = Matrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let b_eq = Vector::from_row_slice(&[1.0, 1.0]);
        let s = solve(&h, &c, &a_eq, &b_eq, &Matrix::zeros(0, 1), &Vector::zeros(0));
        assert_eq!(s.status, QpStatus::Degenerate);
        let bad = Matrix::from_element(1, 1, -1.0);
        let s = solve(&bad, &c, &Matrix::zeros(0, 1), &Vector::zeros(0), &Matrix::zeros(0, 1), &Vector::zeros(0));
        assert_eq!(s.status, QpStatus::NotConvex);
    }

    /// Oracle: try every subset of inequalities as the active set, solve the
    /// equality-constrained KKT system, and keep the subset whose solution is
    /// primal feasible with nonnegative multipliers.
    pub(crate) fn enumerate(
        h: &Matrix,
        c: &Vector,
        a_eq: &Matrix,
        b_eq: &Vector,
        a_in: &Matrix,
        b_in: &Vector,
    ) -> Option<Vector> {
        let n = c.len();
        let (me, mi) = (a_eq.nrows(), a_in.nrows());
        let mut best: Option<(f64, Vector)> = None;
        for mask in 0u32..(1 << mi) {
            let idx: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
            let k = me + idx.len();
            if k > n {
                continue;
            }
            let mut kkt = Matrix::zeros(n + k, n + k);
            let mut rhs = Vector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            rhs.rows_mut(0, n).copy_from(&(-c));
            for r in 0..me {
                for j in 0..n {
                    kkt[(n + r, j)] = a_eq[(r, j)];
                    kkt[(j, n + r)] = a_eq[(r, j)];
                }
                rhs[n + r] = b_eq[r];
            }
            for (q, &i) in idx.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + me + q, j)] = a_in[(i, j)];
                    kkt[(j, n + me + q)] = a_in[(i, j)];
                }
                rhs[n + me + q] = b_in[i];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            let feasible = (a_in * &x - b_in).iter().all(|&v| v <= 1e-10);
            let dual_ok = (0..idx.len()).all(|q| sol[n + me + q] >= -1e-10);
            if feasible && dual_ok {
                let f = 0.5 * x.dot(&(h * &x)) + c.dot(&x);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, x));
                }
            }
        }
        best.map(|b| b.1)
    }

    #[test]
    fn duplicated_constraints() {
        let h = Matrix::identity(2, 2);
        let c = Vector::from_row_slice(&[-3.0, -3.0]);
        let a_in = Matrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b_in = Vector::from_row_slice(&[1.0, 1.0, 1.0, 2.0]);
        let s = solve(&h, &c, &Matrix::zeros(0, 2), &Vector::zeros(0), &a_in, &b_in);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
        let prob = QpProblem { h: &h, c: &c, a_eq: &Matrix::zeros(0, 2), b_eq: &Vector::zeros(0), a_in: &a_in, b_in: &b_in };
        assert!(qp_kkt_residual(&prob, &s) < 1e-12);
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = stream_rng(17, 0);
        let mut solved = 0;
        for _ in 0..300 {
            let n = rng.random_range(2..=5);
            let me = rng.random_range(0..=1usize.min(n - 1));
            let mi = rng.random_range(1..=5);
            let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &m * m.transpose() + Matrix::identity(n, n) * 0.5;
            let c = standard_normal(&mut rng, n);
            let a_eq = Matrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
            let b_eq = Vector::from_fn(me, |_, _| rng.random_range(-0.5..0.5));
            let a_in = Matrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
            let b_in = Vector::from_fn(mi, |_, _| rng.random_range(-0.5..1.0));
            let s = solve(&h, &c, &a_eq, &b_eq, &a_in, &b_in);
            let oracle = enumerate(&h, &c, &a_eq, &b_eq, &a_in, &b_in);
            match oracle {
                Some(xo) => {
                    assert_eq!(s.status, QpStatus::Optimal);
                    assert!((&s.x - &xo).amax() <= 1e-8, "{} vs {}", s.x, xo);
                    let prob = QpProblem { h: &h, c: &c, a_eq: &a_eq, b_eq: &b_eq, a_in: &a_in, b_in: &b_in };
                    assert!(qp_kkt_residual(&prob, &s) <= 1e-9);
                    solved += 1;
                }
                None => assert_eq!(s.status, QpStatus::Infeasible),
            }
        }
        assert!(solved >= 100);
    }
}
