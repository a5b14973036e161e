//! Uncertain discrete-time system, constraint sets, costs and the DC-DC
//! converter benchmark.
//!
//! The disturbed dynamics are affine in the uncertain parameter,
//! `f_w(x, u, θ) = f(x, u) + G(x, u) θ`, with `θ` zero-mean. The nominal map is
//! therefore the certainty-equivalent prediction model.

use std::fmt;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{eig_range, is_symmetric, Matrix, Vector};

/// Nominal map, its Jacobians and the parameter sensitivity `G = ∂f_w/∂θ`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn nominal(&self, x: &Vector, u: &Vector) -> Vector;
    fn jac_state(&self, x: &Vector, u: &Vector) -> Matrix;
    fn jac_input(&self, x: &Vector, u: &Vector) -> Matrix;
    /// `n × n_θ` sensitivity of the successor state to the parameter.
    fn sensitivity(&self, x: &Vector, u: &Vector) -> Matrix;
}

/// Mahalanobis ball `{θ : θᵀ Σ⁻¹ θ ≤ r²}` in which parameters may live.
#[derive(Debug, Clone)]
pub struct ParamSupport {
    /// `None` for a degenerate (zero) covariance: only `θ = 0` is admissible.
    pub cov_inv: Option<Matrix>,
    pub radius: f64,
}

impl ParamSupport {
    pub fn contains(&self, theta: &Vector) -> bool {
        match &self.cov_inv {
            Some(ci) => {
                let r2 = theta.dot(&(ci * theta));
                r2 <= self.radius * self.radius * (1.0 + 1e-12) + 1e-15
            }
            None => theta.amax() == 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    dynamics: Arc<dyn Dynamics>,
    support: Option<ParamSupport>,
}

impl SystemModel {
    pub fn new(dynamics: Arc<dyn Dynamics>) -> Self {
        SystemModel {
            dynamics,
            support: None,
        }
    }

    pub fn with_support(mut self, support: ParamSupport) -> Self {
        self.support = Some(support);
        self
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn n_theta(&self) -> usize {
        self.dynamics.param_dim()
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    fn check_xu(&self, x: &Vector, u: &Vector) -> Result<()> {
        check_dim("state", self.n(), x.len())?;
        check_dim("input", self.m(), u.len())
    }

    fn check_theta(&self, theta: &Vector) -> Result<()> {
        check_dim("disturbance parameter", self.n_theta(), theta.len())?;
        if let Some(s) = &self.support {
            if !s.contains(theta) {
                return Err(Error::Domain(format!(
                    "parameter {:?} outside the declared support",
                    theta.as_slice()
                )));
            }
        }
        Ok(())
    }

    pub fn step_nominal(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.check_xu(x, u)?;
        Ok(self.f(x, u))
    }

    pub fn step_disturbed(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        self.check_xu(x, u)?;
        self.check_theta(theta)?;
        Ok(self.f_w(x, u, theta))
    }

    /// `f_w(x, u, θ) − f(x, u)`.
    pub fn model_mismatch(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        self.check_xu(x, u)?;
        self.check_theta(theta)?;
        Ok(self.g(x, u) * theta)
    }

    // Unchecked hot-path versions.
    pub fn f(&self, x: &Vector, u: &Vector) -> Vector {
        self.dynamics.nominal(x, u)
    }

    pub fn f_w(&self, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        self.dynamics.nominal(x, u) + self.dynamics.sensitivity(x, u) * theta
    }

    pub fn g(&self, x: &Vector, u: &Vector) -> Matrix {
        self.dynamics.sensitivity(x, u)
    }

    pub fn jac_x(&self, x: &Vector, u: &Vector) -> Matrix {
        self.dynamics.jac_state(x, u)
    }

    pub fn jac_u(&self, x: &Vector, u: &Vector) -> Matrix {
        self.dynamics.jac_input(x, u)
    }
}

/// Converter record for the boost DC-DC benchmark. Every field is required;
/// there are deliberately no defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcDcParams {
    /// Sampling period `T`.
    pub sample_time: f64,
    /// Inductance `L`.
    pub inductance: f64,
    /// Capacitance `C`.
    pub capacitance: f64,
    /// Load resistance `R`.
    pub resistance: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Nominal value of the uncertain coefficient `α` (coefficient of `x₂` in `x₁⁺`).
    pub alpha_nominal: f64,
    /// Nominal value of the uncertain coefficient `δ` (coefficient of `x₁` in `x₂⁺`).
    pub delta_nominal: f64,
}

impl DcDcParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("sample_time", self.sample_time),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("resistance", self.resistance),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "converter parameter `{name}` must be positive, got {v}"
                )));
            }
        }
        if !self.alpha_nominal.is_finite() || !self.delta_nominal.is_finite() {
            return Err(Error::Config("nominal α, δ must be finite".into()));
        }
        Ok(())
    }
}

/// Averaged boost converter translated to the origin:
///
/// ```text
/// x₁⁺ = x₁ + α x₂ + (β − T/L x₂) u
/// x₂⁺ = (T/C x₁ + γ) u + (1 − T/(RC)) x₂ + δ x₁
/// ```
///
/// with `α = α₀ + θ₁`, `δ = δ₀ + θ₂`.
#[derive(Debug, Clone)]
pub struct DcDcConverter {
    pub params: DcDcParams,
    t_over_l: f64,
    t_over_c: f64,
    t_over_rc: f64,
}

impl DcDcConverter {
    pub fn new(params: DcDcParams) -> Result<Self> {
        params.validate()?;
        let p = params;
        Ok(DcDcConverter {
            params,
            t_over_l: p.sample_time / p.inductance,
            t_over_c: p.sample_time / p.capacitance,
            t_over_rc: p.sample_time / (p.resistance * p.capacitance),
        })
    }
}

impl Dynamics for DcDcConverter {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn nominal(&self, x: &Vector, u: &Vector) -> Vector {
        let p = &self.params;
        let (x1, x2, u) = (x[0], x[1], u[0]);
        Vector::from_vec(vec![
            x1 + p.alpha_nominal * x2 + (p.beta - self.t_over_l * x2) * u,
            (self.t_over_c * x1 + p.gamma) * u + (1.0 - self.t_over_rc) * x2 + p.delta_nominal * x1,
        ])
    }

    fn jac_state(&self, _x: &Vector, u: &Vector) -> Matrix {
        let p = &self.params;
        let u = u[0];
        Matrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                p.alpha_nominal - self.t_over_l * u,
                p.delta_nominal + self.t_over_c * u,
                1.0 - self.t_over_rc,
            ],
        )
    }

    fn jac_input(&self, x: &Vector, _u: &Vector) -> Matrix {
        let p = &self.params;
        Matrix::from_row_slice(
            2,
            1,
            &[p.beta - self.t_over_l * x[1], self.t_over_c * x[0] + p.gamma],
        )
    }

    fn sensitivity(&self, x: &Vector, _u: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 2, &[x[1], 0.0, 0.0, x[0]])
    }
}

/// `x⁺ = A x + B u + G θ`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub g: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, g: Matrix) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::Config("A must be square".into()));
        }
        check_dim("rows of B", n, b.nrows())?;
        check_dim("rows of G", n, g.nrows())?;
        Ok(LinearSystem { a, b, g })
    }
}

impl Dynamics for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn param_dim(&self) -> usize {
        self.g.ncols()
    }

    fn nominal(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    fn jac_state(&self, _x: &Vector, _u: &Vector) -> Matrix {
        self.a.clone()
    }

    fn jac_input(&self, _x: &Vector, _u: &Vector) -> Matrix {
        self.b.clone()
    }

    fn sensitivity(&self, _x: &Vector, _u: &Vector) -> Matrix {
        self.g.clone()
    }
}

/// User-supplied differentiable scalar map of `(x, u)`.
pub trait ScalarMap: Send + Sync + fmt::Debug {
    fn eval(&self, x: &Vector, u: &Vector) -> f64;
    fn grad(&self, x: &Vector, u: &Vector) -> (Vector, Vector);
}

/// Smooth scalar constraint function; the constraint reads `map(x, u) ≤ 0`.
#[derive(Debug, Clone)]
pub enum ConstraintFn {
    /// `aₓᵀ x + aᵤᵀ u + offset`
    Affine {
        state: Vector,
        input: Vector,
        offset: f64,
    },
    /// `scale · x_i · x_j + offset`
    StateProduct {
        i: usize,
        j: usize,
        scale: f64,
        offset: f64,
    },
    Custom(Arc<dyn ScalarMap>),
}

impl ConstraintFn {
    pub fn eval(&self, x: &Vector, u: &Vector) -> f64 {
        match self {
            ConstraintFn::Affine {
                state,
                input,
                offset,
            } => state.dot(x) + input.dot(u) + offset,
            ConstraintFn::StateProduct {
                i,
                j,
                scale,
                offset,
            } => scale * x[*i] * x[*j] + offset,
            ConstraintFn::Custom(f) => f.eval(x, u),
        }
    }

    /// Gradient with respect to `x` and `u`.
    pub fn grad(&self, x: &Vector, u: &Vector) -> (Vector, Vector) {
        match self {
            ConstraintFn::Affine { state, input, .. } => (state.clone(), input.clone()),
            ConstraintFn::StateProduct { i, j, scale, .. } => {
                let mut gx = Vector::zeros(x.len());
                gx[*i] += scale * x[*j];
                gx[*j] += scale * x[*i];
                (gx, Vector::zeros(u.len()))
            }
            ConstraintFn::Custom(f) => f.grad(x, u),
        }
    }

    /// `false` when the map provably ignores `u`.
    pub fn depends_on_input(&self) -> bool {
        match self {
            ConstraintFn::Affine { input, .. } => input.amax() != 0.0,
            ConstraintFn::StateProduct { .. } => false,
            ConstraintFn::Custom(_) => true,
        }
    }

    fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        match self {
            ConstraintFn::Affine { state, input, .. } => {
                check_dim("constraint state coefficients", n, state.len())?;
                check_dim("constraint input coefficients", m, input.len())
            }
            ConstraintFn::StateProduct { i, j, .. } => {
                if *i >= n || *j >= n {
                    return Err(Error::Config(format!(
                        "state product indices ({i}, {j}) out of range for n = {n}"
                    )));
                }
                Ok(())
            }
            ConstraintFn::Custom(_) => Ok(()),
        }
    }

    /// `Some((j, bound))` when the map is `±u_j − bound` with no state term.
    fn as_input_bound(&self) -> Option<(usize, f64, f64)> {
        if let ConstraintFn::Affine {
            state,
            input,
            offset,
        } = self
        {
            if state.amax() != 0.0 {
                return None;
            }
            let nz: Vec<usize> = (0..input.len()).filter(|&j| input[j] != 0.0).collect();
            if nz.len() == 1 {
                let j = nz[0];
                return Some((j, input[j], -offset / input[j]));
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct HardConstraint {
    pub name: String,
    pub map: ConstraintFn,
    /// Local Lipschitz constant `L^R`; `None` means estimate by sampling.
    pub lipschitz: Option<f64>,
    /// Tightening constant `c^R`, filled in once the ILF design is known.
    pub tightening: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ChanceConstraint {
    pub name: String,
    pub map: ConstraintFn,
    pub lipschitz: Option<f64>,
    pub tightening: Option<f64>,
    /// Required satisfaction probability.
    pub level: f64,
}

#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub hard: Vec<HardConstraint>,
    pub chance: Vec<ChanceConstraint>,
    levels: Vec<f64>,
}

impl ConstraintSpec {
    /// Validates the constraint set for a system with `n` states and `m`
    /// inputs: levels in `(0, 1]`, nonnegative constants, and the origin
    /// strictly inside every constraint.
    pub fn new(
        hard: Vec<HardConstraint>,
        chance: Vec<ChanceConstraint>,
        n: usize,
        m: usize,
    ) -> Result<Self> {
        let x0 = Vector::zeros(n);
        let u0 = Vector::zeros(m);
        for h in &hard {
            h.map.check_dims(n, m)?;
            check_nonneg(&h.name, "Lipschitz constant", h.lipschitz)?;
            check_nonneg(&h.name, "tightening", h.tightening)?;
            if h.map.eval(&x0, &u0) >= 0.0 {
                return Err(Error::Config(format!(
                    "hard constraint `{}` does not contain the origin in its interior",
                    h.name
                )));
            }
        }
        for c in &chance {
            c.map.check_dims(n, m)?;
            check_nonneg(&c.name, "Lipschitz constant", c.lipschitz)?;
            check_nonneg(&c.name, "tightening", c.tightening)?;
            if !(c.level > 0.0 && c.level <= 1.0) {
                return Err(Error::Config(format!(
                    "chance constraint `{}` has level {} outside (0, 1]",
                    c.name, c.level
                )));
            }
            if c.map.eval(&x0, &u0) >= 0.0 {
                return Err(Error::Config(format!(
                    "chance constraint `{}` does not contain the origin in its interior",
                    c.name
                )));
            }
        }
        let mut levels: Vec<f64> = chance.iter().map(|c| c.level).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        Ok(ConstraintSpec {
            hard,
            chance,
            levels,
        })
    }

    /// Distinct chance-constraint levels in ascending order.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Box on the inputs implied by affine input-only hard constraints.
    pub fn input_box(&self, m: usize) -> (Vector, Vector) {
        let mut lo = Vector::from_element(m, f64::NEG_INFINITY);
        let mut hi = Vector::from_element(m, f64::INFINITY);
        for h in &self.hard {
            if let Some((j, coef, bound)) = h.map.as_input_bound() {
                if coef > 0.0 {
                    hi[j] = hi[j].min(bound);
                } else {
                    lo[j] = lo[j].max(bound);
                }
            }
        }
        (lo, hi)
    }
}

fn check_nonneg(name: &str, what: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(v) if !(v.is_finite() && v >= 0.0) => Err(Error::Config(format!(
            "constraint `{name}`: {what} must be a nonnegative number, got {v}"
        ))),
        _ => Ok(()),
    }
}

/// Quadratic stage cost `xᵀQx + uᵀRu`, optional terminal cost `xᵀP_f x` and
/// the prediction horizon.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: Matrix,
    pub r: Matrix,
    pub terminal: Option<Matrix>,
    pub horizon: usize,
    positive_definite: bool,
}

impl CostSpec {
    pub fn new(q: Matrix, r: Matrix, terminal: Option<Matrix>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let mut mats = vec![("Q", &q), ("R", &r)];
        if let Some(pf) = &terminal {
            mats.push(("P_f", pf));
        }
        for (name, mtx) in mats {
            if !is_symmetric(mtx, 1e-10) {
                return Err(Error::Config(format!("cost matrix {name} must be symmetric")));
            }
            if mtx.nrows() > 0 && eig_range(mtx).0 < -1e-12 {
                return Err(Error::Config(format!(
                    "cost matrix {name} must be positive semidefinite"
                )));
            }
        }
        let pd = |m: &Matrix| m.nrows() == 0 || eig_range(m).0 > 0.0;
        let positive_definite = pd(&q) && pd(&r);
        if !positive_definite {
            warn!(
                "stage cost is not positive definite; the closed-loop stability guarantee \
                 does not apply (constraint satisfaction and feasibility still do)"
            );
        }
        Ok(CostSpec {
            q,
            r,
            terminal,
            horizon,
            positive_definite,
        })
    }

    pub fn is_positive_definite(&self) -> bool {
        self.positive_definite
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        self.terminal.as_ref().map_or(0.0, |p| x.dot(&(p * x)))
    }
}

/// Input bound and power constraint of the converter study.
pub const DCDC_INPUT_BOUND: f64 = 0.2;
pub const DCDC_POWER_BOUND: f64 = 2.0;
pub const DCDC_POWER_LEVEL: f64 = 0.8;

/// Builds the converter model, its constraints (`|u| ≤ 0.2` hard,
/// `ℙ[|x₁x₂| ≤ 2] ≥ 0.8` as two smooth chance constraints) and the stage cost
/// `ℓ = u²` with no terminal cost.
///
/// The power constraints carry no Lipschitz constant; they are estimated over
/// the operating domain once the ILF is known.
pub fn dcdc_benchmark(
    params: &DcDcParams,
    horizon: usize,
) -> Result<(SystemModel, ConstraintSpec, CostSpec)> {
    let conv = DcDcConverter::new(*params)?;
    let model = SystemModel::new(Arc::new(conv));
    let input = |sign: f64| ConstraintFn::Affine {
        state: Vector::zeros(2),
        input: Vector::from_element(1, sign),
        offset: -DCDC_INPUT_BOUND,
    };
    let power = |sign: f64| ConstraintFn::StateProduct {
        i: 0,
        j: 1,
        scale: sign,
        offset: -DCDC_POWER_BOUND,
    };
    let hard = vec![
        HardConstraint {
            name: "input_upper".into(),
            map: input(1.0),
            lipschitz: Some(1.0),
            tightening: None,
        },
        HardConstraint {
            name: "input_lower".into(),
            map: input(-1.0),
            lipschitz: Some(1.0),
            tightening: None,
        },
    ];
    let chance = vec![
        ChanceConstraint {
            name: "power_upper".into(),
            map: power(1.0),
            lipschitz: None,
            tightening: None,
            level: DCDC_POWER_LEVEL,
        },
        ChanceConstraint {
            name: "power_lower".into(),
            map: power(-1.0),
            lipschitz: None,
            tightening: None,
            level: DCDC_POWER_LEVEL,
        },
    ];
    let constraints = ConstraintSpec::new(hard, chance, 2, 1)?;
    let cost = CostSpec::new(
        Matrix::zeros(2, 2),
        Matrix::from_element(1, 1, 1.0),
        None,
        horizon,
    )?;
    Ok((model, constraints, cost))
}
