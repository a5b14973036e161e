//! Quadratic incremental Lyapunov function `V_δ(x, z, v) = ‖x − z‖²_P`, the
//! incremental feedback `κ(x, z, v) = K(x − z) + v`, sampled contraction and
//! Lipschitz checks, and constraint tightening constants.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{eig_range, is_symmetric, sym_sqrt, Matrix, Vector};
use crate::model::{ConstraintFn, SystemModel};
use crate::report::CheckOutcome;
use crate::sampling::{par_sample, unit_ball, BoxDomain, Rng64};

/// Safety factor applied to sampled Lipschitz estimates.
pub const DEFAULT_LIPSCHITZ_SAFETY: f64 = 1.1;

/// Raw matrices and constants of an ILF design, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlfParams {
    /// Shape matrix `P`, row-major.
    pub p: Vec<Vec<f64>>,
    /// Feedback gain `K` (`m × n`), row-major.
    pub k: Vec<Vec<f64>>,
    pub rho: f64,
    pub c_delta_lower: f64,
    pub c_delta_upper: f64,
    pub delta_loc: f64,
    pub kappa_max: f64,
}

#[derive(Debug, Clone)]
pub struct IlfDesign {
    pub p: Matrix,
    pub k: Matrix,
    pub rho: f64,
    pub c_delta_lower: f64,
    pub c_delta_upper: f64,
    pub delta_loc: f64,
    pub kappa_max: f64,
    p_sqrt: Matrix,
    p_inv_sqrt: Matrix,
}

impl IlfDesign {
    /// Validates the eigenvalue sandwich, the feedback deviation bound and
    /// the ranges of `ρ` and `δ_loc`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: Matrix,
        k: Matrix,
        rho: f64,
        c_delta_lower: f64,
        c_delta_upper: f64,
        delta_loc: f64,
        kappa_max: f64,
    ) -> Result<Self> {
        let n = p.nrows();
        if !is_symmetric(&p, 1e-10) {
            return Err(Error::Config("ILF shape P must be symmetric".into()));
        }
        check_dim("columns of K", n, k.ncols())?;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!("contraction rate ρ = {rho} must lie in (0, 1)")));
        }
        if !(delta_loc > 0.0 && delta_loc.is_finite()) {
            return Err(Error::Config(format!("δ_loc = {delta_loc} must be positive")));
        }
        if !(c_delta_lower > 0.0 && c_delta_upper.is_finite()) {
            return Err(Error::Config("c_δ,l must be positive and c_δ,u finite".into()));
        }
        let (lmin, lmax) = eig_range(&p);
        if lmin <= 0.0 {
            return Err(Error::Config("ILF shape P must be positive definite".into()));
        }
        let tol = 1e-9;
        if c_delta_lower > lmin * (1.0 + tol) {
            return Err(Error::Config(format!(
                "c_δ,l = {c_delta_lower} exceeds λ_min(P) = {lmin}"
            )));
        }
        if lmax > c_delta_upper * (1.0 + tol) {
            return Err(Error::Config(format!(
                "λ_max(P) = {lmax} exceeds c_δ,u = {c_delta_upper}"
            )));
        }
        let kk = k.transpose() * &k;
        let required = if kk.nrows() == 0 { 0.0 } else { eig_range(&kk).1.max(0.0) / c_delta_lower };
        if !(kappa_max >= required * (1.0 - tol)) {
            return Err(Error::Config(format!(
                "κ_max = {kappa_max} is below λ_max(KᵀK)/c_δ,l = {required}"
            )));
        }
        let p_sqrt = sym_sqrt(&p)?;
        let p_inv_sqrt = p_sqrt
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("ILF shape P is singular".into()))?;
        Ok(IlfDesign {
            p,
            k,
            rho,
            c_delta_lower,
            c_delta_upper,
            delta_loc,
            kappa_max,
            p_sqrt,
            p_inv_sqrt,
        })
    }

    pub fn from_params(params: &IlfParams) -> Result<Self> {
        let p = crate::linalg::from_rows(&params.p)?;
        let k = crate::linalg::from_rows(&params.k)?;
        IlfDesign::new(
            p,
            k,
            params.rho,
            params.c_delta_lower,
            params.c_delta_upper,
            params.delta_loc,
            params.kappa_max,
        )
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    pub fn p_sqrt(&self) -> &Matrix {
        &self.p_sqrt
    }

    /// Maximal tube size `s̄ = √δ_loc`.
    pub fn s_bar(&self) -> f64 {
        self.delta_loc.sqrt()
    }

    /// `V_δ(x, z, v)`; the quadratic ILF does not depend on `v`.
    pub fn v_delta(&self, x: &Vector, z: &Vector, v: &Vector) -> Result<f64> {
        check_dim("state x", self.n(), x.len())?;
        check_dim("state z", self.n(), z.len())?;
        check_dim("input v", self.m(), v.len())?;
        Ok(self.v(x, z))
    }

    pub fn kappa(&self, x: &Vector, z: &Vector, v: &Vector) -> Result<Vector> {
        check_dim("state x", self.n(), x.len())?;
        check_dim("state z", self.n(), z.len())?;
        check_dim("input v", self.m(), v.len())?;
        Ok(self.feedback(x, z, v))
    }

    /// Unchecked `‖x − z‖²_P`.
    pub fn v(&self, x: &Vector, z: &Vector) -> f64 {
        let d = x - z;
        d.dot(&(&self.p * &d))
    }

    /// Unchecked `K(x − z) + v`.
    pub fn feedback(&self, x: &Vector, z: &Vector, v: &Vector) -> Vector {
        &self.k * (x - z) + v
    }

    /// Uniform point of the sublevel set `{x : V_δ(x, z) ≤ c²}`.
    pub fn sample_in_tube(&self, rng: &mut Rng64, z: &Vector, c: f64) -> Vector {
        z + &self.p_inv_sqrt * unit_ball(rng, self.n()) * c
    }

    /// Point with `V_δ(x, z) = c²` exactly along a uniformly random direction.
    pub fn sample_on_tube(&self, rng: &mut Rng64, z: &Vector, c: f64) -> Vector {
        z + &self.p_inv_sqrt * crate::sampling::unit_sphere(rng, self.n()) * c
    }

    /// Squared bound on `‖(x, κ) − (z, v)‖²` per unit of `V_δ`.
    pub fn joint_deviation_factor(&self) -> f64 {
        1.0 / self.c_delta_lower + self.kappa_max
    }
}

/// `c = L·√(1/c_δ,l + κ_max)`, so that
/// `g(x, κ(x, z, v)) − g(z, v) ≤ c·√V_δ(x, z, v)` inside the local region.
pub fn tightening_constant(lipschitz: f64, design: &IlfDesign) -> Result<f64> {
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(Error::Domain(format!(
            "Lipschitz constant must be a nonnegative number, got {lipschitz}"
        )));
    }
    Ok(lipschitz * design.joint_deviation_factor().sqrt())
}

/// Outcome of a sampled contraction check.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub samples: usize,
    pub max_ratio: f64,
    pub bound: f64,
    /// `(x, z, v)` attaining the maximum when it exceeds `ρ²`.
    pub witness: Option<(Vector, Vector, Vector)>,
}

impl ContractionReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_ratio <= self.bound + tol
    }

    pub fn outcome(&self, tol: f64) -> CheckOutcome {
        CheckOutcome::at_most("contraction", self.samples, self.max_ratio, self.bound + tol)
            .with_witness(self.witness.as_ref().map(|(x, z, v)| {
                format!("x={:?} z={:?} v={:?}", x.as_slice(), z.as_slice(), v.as_slice())
            }))
    }
}

/// Draws `(z, v)` from the domain and `x` in the `δ_loc` sublevel around `z`,
/// and records the largest ratio `V_δ(x⁺, z⁺) / V_δ(x, z)` with
/// `x⁺ = f(x, κ(x, z, v))`, `z⁺ = f(z, v)`.
pub fn verify_contraction(
    design: &IlfDesign,
    model: &SystemModel,
    domain: &BoxDomain,
    count: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if count == 0 {
        return Err(Error::Usage("contraction check needs at least one sample".into()));
    }
    check_dim("domain states", design.n(), domain.n())?;
    check_dim("model states", design.n(), model.n())?;
    let c = design.s_bar();
    let samples = par_sample(seed, count, |rng| {
        let (z, v) = domain.sample(rng);
        let x = loop {
            let x = design.sample_in_tube(rng, &z, c);
            if design.v(&x, &z) > 0.0 {
                break x;
            }
        };
        let u = design.feedback(&x, &z, &v);
        let ratio = design.v(&model.f(&x, &u), &model.f(&z, &v)) / design.v(&x, &z);
        (ratio, x, z, v)
    });
    let bound = design.rho * design.rho;
    let (max_ratio, arg) = samples
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |(m, a), (i, s)| {
            if s.0 > m {
                (s.0, i)
            } else {
                (m, a)
            }
        });
    let witness = (max_ratio > bound).then(|| {
        let (_, x, z, v) = &samples[arg];
        (x.clone(), z.clone(), v.clone())
    });
    Ok(ContractionReport {
        samples: count,
        max_ratio,
        bound,
        witness,
    })
}

/// Sampled local Lipschitz constant of a constraint map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub raw: f64,
    pub inflated: f64,
}

/// Empirical Lipschitz constant of `map` over the domain, probing pairs
/// `r`, `r̃` with `‖r − r̃‖² ≤ δ_loc·(1/c_δ,l + κ_max)` and the gradient norms
/// at both points. The joint radius covers every `(x, κ(x, z, v))` that the
/// tightening argument compares with `(z, v)`.
pub fn local_lipschitz_estimate(
    map: &ConstraintFn,
    design: &IlfDesign,
    domain: &BoxDomain,
    count: usize,
    seed: u64,
    safety: f64,
) -> Result<LipschitzEstimate> {
    if count == 0 {
        return Err(Error::Usage("Lipschitz estimate needs at least one sample".into()));
    }
    if !(safety >= 1.0) {
        return Err(Error::Config(format!("Lipschitz safety factor {safety} must be ≥ 1")));
    }
    let (n, m) = (domain.n(), domain.m());
    let radius = (design.delta_loc * design.joint_deviation_factor()).sqrt();
    let values = par_sample(seed, count, |rng| {
        let (x, u) = domain.sample(rng);
        let d = unit_ball(rng, n + m) * radius;
        let xt = &x + d.rows(0, n);
        let ut = &u + d.rows(n, m);
        let grad_norm = |x: &Vector, u: &Vector| {
            let (gx, gu) = map.grad(x, u);
            (gx.norm_squared() + gu.norm_squared()).sqrt()
        };
        let dn = d.norm();
        let quotient = if dn > 0.0 {
            (map.eval(&xt, &ut) - map.eval(&x, &u)).abs() / dn
        } else {
            0.0
        };
        quotient.max(grad_norm(&x, &u)).max(grad_norm(&xt, &ut))
    });
    let raw = values.into_iter().fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        raw,
        inflated: raw * safety,
    })
}

/// Sampled check of `map(x, κ(x, z, v)) − map(z, v) ≤ c_tight·c` over tubes
/// `V_δ ≤ c²` for `c ∈ {0.1, 0.2, …, 1}·√δ_loc`. Reports the largest excess.
pub fn verify_tightening(
    name: &str,
    map: &ConstraintFn,
    c_tight: f64,
    design: &IlfDesign,
    domain: &BoxDomain,
    count: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    if count == 0 {
        return Err(Error::Usage("tightening check needs at least one sample".into()));
    }
    let s_bar = design.s_bar();
    let excess = par_sample(seed, count, |rng| {
        let (z, v) = domain.sample(rng);
        let mut worst = f64::NEG_INFINITY;
        for step in 1..=10 {
            let c = 0.1 * step as f64 * s_bar;
            let x = design.sample_on_tube(rng, &z, c);
            let u = design.feedback(&x, &z, &v);
            worst = worst.max(map.eval(&x, &u) - map.eval(&z, &v) - c_tight * c);
        }
        worst
    });
    let worst = excess.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckOutcome::at_most(format!("tightening[{name}]"), count * 10, worst, 1e-12))
}
