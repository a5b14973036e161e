//! Truncated-Gaussian parameter uncertainty, its quantile function and the
//! probabilistic disturbance bounds used to size the tubes.
//!
//! `θ ~ N(0, Σ_θ)` conditioned on `θᵀΣ_θ⁻¹θ ≤ r²`, and `d_w(x, u) = G(x, u)θ`.
//! The tube bound is
//! `w̃ᵖ(z, v, c) = ‖P^½ G(z, v) Σ_θ^½‖₂ √ε(p) + L_w(p)·c`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ilf::IlfDesign;
use crate::linalg::{eig_range, is_symmetric, sym_sqrt, top_singular, Matrix, Vector};
use crate::model::{ParamSupport, SystemModel};
use crate::report::CheckOutcome;
use crate::sampling::{par_sample, standard_normal, BoxDomain, Rng64};

/// Relative slack used when comparing a sampled deviation with its bound.
const COVER_TOL: f64 = 1e-12;

/// Levels are matched against configured ones up to this distance.
const LEVEL_TOL: f64 = 1e-12;

/// Quantiles are rounded up to this grid.
const QUANTILE_GRID: f64 = 1e-4;

/// Standard errors added to the level before picking the order statistic.
const QUANTILE_MARGIN_SE: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct DisturbanceModel {
    cov: Matrix,
    cov_sqrt: Matrix,
    cov_inv: Option<Matrix>,
    radius: f64,
    /// `(p, ε(p))` sorted by `p`, always ending with `(1, r²)`.
    quantiles: Vec<(f64, f64)>,
}

impl DisturbanceModel {
    /// Builds the model and its quantile cache from `samples` truncated draws.
    /// `Σ_θ` must be symmetric positive definite or identically zero (the
    /// deterministic case).
    pub fn new(cov: Matrix, radius: f64, levels: &[f64], samples: usize, seed: u64) -> Result<Self> {
        if !is_symmetric(&cov, 1e-12) {
            return Err(Error::Config("covariance Σ_θ must be symmetric".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("truncation radius {radius} must be positive")));
        }
        let deterministic = cov.amax() == 0.0;
        let cov_inv = if deterministic {
            None
        } else {
            if eig_range(&cov).0 <= 0.0 {
                return Err(Error::Config(
                    "covariance Σ_θ must be positive definite (or zero)".into(),
                ));
            }
            Some(cov.clone().try_inverse().ok_or_else(|| {
                Error::Config("covariance Σ_θ is numerically singular".into())
            })?)
        };
        let cov_sqrt = sym_sqrt(&cov)?;
        for &p in levels {
            check_level(p)?;
        }
        if samples == 0 && levels.iter().any(|&p| p < 1.0) {
            return Err(Error::Config("quantile cache needs a positive sample count".into()));
        }
        let n = cov.nrows();
        let mut sq: Vec<f64> = if levels.iter().any(|&p| p < 1.0) {
            par_sample(seed, samples, |rng| truncated_standard(rng, n, radius).norm_squared())
        } else {
            Vec::new()
        };
        sq.sort_by(f64::total_cmp);
        let r2 = radius * radius;
        let mut lv: Vec<f64> = levels.iter().copied().filter(|&p| p < 1.0).collect();
        lv.sort_by(f64::total_cmp);
        lv.dedup();
        let mut quantiles = Vec::with_capacity(lv.len() + 1);
        let mut running: f64 = 0.0;
        for p in lv {
            // Order statistic at an upper confidence bound of the level, so
            // the cached value over-covers with overwhelming probability.
            let n_s = sq.len() as f64;
            let target = p + QUANTILE_MARGIN_SE * (p * (1.0 - p) / n_s).sqrt();
            let idx = ((target * n_s).ceil() as usize).clamp(1, sq.len()) - 1;
            let eps = ((sq[idx] / QUANTILE_GRID).ceil() * QUANTILE_GRID).min(r2);
            running = running.max(eps);
            quantiles.push((p, running));
        }
        quantiles.push((1.0, r2));
        Ok(DisturbanceModel {
            cov,
            cov_sqrt,
            cov_inv,
            radius,
            quantiles,
        })
    }

    pub fn n_theta(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn cov_sqrt(&self) -> &Matrix {
        &self.cov_sqrt
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn is_deterministic(&self) -> bool {
        self.cov_inv.is_none()
    }

    pub fn support(&self) -> ParamSupport {
        ParamSupport {
            cov_inv: self.cov_inv.clone(),
            radius: self.radius,
        }
    }

    /// Cached `(p, ε(p))` pairs.
    pub fn quantile_table(&self) -> &[(f64, f64)] {
        &self.quantiles
    }

    /// `ε(p)`: the cached quantile of the smallest cached level `≥ p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        check_level(p)?;
        Ok(self
            .quantiles
            .iter()
            .find(|(q, _)| *q >= p - LEVEL_TOL)
            .map_or(self.radius * self.radius, |&(_, e)| e))
    }

    pub fn sample_theta(&self, rng: &mut Rng64) -> Vector {
        if self.is_deterministic() {
            return Vector::zeros(self.n_theta());
        }
        &self.cov_sqrt * truncated_standard(rng, self.n_theta(), self.radius)
    }

    /// Draws `d_w(x, u) = G(x, u)θ`.
    pub fn sample(&self, rng: &mut Rng64, model: &SystemModel, x: &Vector, u: &Vector) -> Vector {
        model.g(x, u) * self.sample_theta(rng)
    }

    /// `ŵᵖ(x, u) = ‖G Σ_θ^½‖₂ √ε(p)`.
    pub fn w_hat(&self, p: f64, model: &SystemModel, x: &Vector, u: &Vector) -> Result<f64> {
        let eps = self.quantile(p)?;
        Ok(crate::linalg::spectral_norm(&(model.g(x, u) * &self.cov_sqrt)) * eps.sqrt())
    }
}

fn check_level(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability level {p} outside (0, 1]")))
    }
}

/// Standard normal vector conditioned on `‖ζ‖ ≤ r`, by rejection.
fn truncated_standard(rng: &mut Rng64, n: usize, r: f64) -> Vector {
    let r2 = r * r;
    loop {
        let z = standard_normal(rng, n);
        if z.norm_squared() <= r2 {
            return z;
        }
    }
}

/// Value and gradient of `w̃ᵖ` at `(z, v, c)`.
#[derive(Debug, Clone)]
pub struct BoundEval {
    pub value: f64,
    pub grad_x: Vector,
    pub grad_u: Vector,
    pub grad_c: f64,
}

/// Ingredients of `w̃ᵖ_δ`: the ILF square root, the per-level slopes and
/// `c_δ,u`.
#[derive(Debug, Clone)]
pub struct TubeBoundSpec {
    p_sqrt: Matrix,
    /// `(p, L_w(p))` sorted by `p`.
    lw: Vec<(f64, f64)>,
    pub c_delta_upper: f64,
}

impl TubeBoundSpec {
    pub fn new(design: &IlfDesign, mut lw: Vec<(f64, f64)>) -> Result<Self> {
        lw.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in lw.windows(2) {
            if (w[1].0 - w[0].0).abs() <= LEVEL_TOL {
                return Err(Error::Config(format!("L_w level {} listed twice", w[0].0)));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Config(format!(
                    "L_w must be nondecreasing in p: L_w({}) = {} > L_w({}) = {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        for &(p, l) in &lw {
            check_level(p).map_err(|e| Error::Config(e.to_string()))?;
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("L_w({p}) = {l} must be nonnegative")));
            }
        }
        Ok(TubeBoundSpec {
            p_sqrt: design.p_sqrt().clone(),
            lw,
            c_delta_upper: design.c_delta_upper,
        })
    }

    pub fn lw_table(&self) -> &[(f64, f64)] {
        &self.lw
    }

    pub fn lw(&self, p: f64) -> Result<f64> {
        self.lw
            .iter()
            .find(|(q, _)| (q - p).abs() <= LEVEL_TOL)
            .map(|&(_, l)| l)
            .ok_or_else(|| Error::Domain(format!("no L_w configured for level {p}")))
    }

    /// Checks that every required level has a slope.
    pub fn require_levels(&self, levels: &[f64]) -> Result<()> {
        for &p in levels {
            self.lw(p).map_err(|_| {
                Error::Config(format!("level {p} is missing from the L_w table"))
            })?;
        }
        Ok(())
    }

    fn scaled_sensitivity(&self, dm: &DisturbanceModel, g: &Matrix) -> Matrix {
        &self.p_sqrt * g * dm.cov_sqrt()
    }

    /// `‖P^½ G(z, v) Σ_θ^½‖₂ √ε(p)`, the `c`-independent part.
    pub fn base(&self, dm: &DisturbanceModel, model: &SystemModel, p: f64, z: &Vector, v: &Vector) -> Result<f64> {
        let eps = dm.quantile(p)?;
        let m = self.scaled_sensitivity(dm, &model.g(z, v));
        Ok(crate::linalg::spectral_norm(&m) * eps.sqrt())
    }

    pub fn w_tilde_delta(
        &self,
        dm: &DisturbanceModel,
        model: &SystemModel,
        p: f64,
        z: &Vector,
        v: &Vector,
        c: f64,
    ) -> Result<f64> {
        if !(c >= 0.0) {
            return Err(Error::Domain(format!("tube size c = {c} must be nonnegative")));
        }
        check_dim("state", model.n(), z.len())?;
        check_dim("input", model.m(), v.len())?;
        let lw = self.lw(p)?;
        Ok(self.base(dm, model, p, z, v)? + lw * c)
    }

    /// `w̃ᵖ` with its gradient. The spectral norm is differentiated through its
    /// top singular pair when that value is separated from the next one;
    /// otherwise central differences of the norm itself are used.
    pub fn w_tilde_with_grad(
        &self,
        dm: &DisturbanceModel,
        model: &SystemModel,
        p: f64,
        z: &Vector,
        v: &Vector,
        c: f64,
        fd_step: f64,
    ) -> Result<BoundEval> {
        let lw = self.lw(p)?;
        let sq = dm.quantile(p)?.sqrt();
        let m0 = self.scaled_sensitivity(dm, &model.g(z, v));
        let top = top_singular(&m0);
        let (n, mm) = (z.len(), v.len());
        let mut grad_x = Vector::zeros(n);
        let mut grad_u = Vector::zeros(mm);
        let smooth = top.gap > 1e-8 * (1.0 + top.value);
        let h = fd_step;
        let sigma_at = |zz: &Vector, vv: &Vector| {
            crate::linalg::spectral_norm(&self.scaled_sensitivity(dm, &model.g(zz, vv)))
        };
        for i in 0..n + mm {
            let (mut zp, mut vp, mut zm, mut vm) = (z.clone(), v.clone(), z.clone(), v.clone());
            if i < n {
                zp[i] += h;
                zm[i] -= h;
            } else {
                vp[i - n] += h;
                vm[i - n] -= h;
            }
            let d = if smooth {
                let dg = (model.g(&zp, &vp) - model.g(&zm, &vm)) / (2.0 * h);
                let dm_ = self.scaled_sensitivity(dm, &dg);
                top.left.dot(&(dm_ * &top.right))
            } else {
                (sigma_at(&zp, &vp) - sigma_at(&zm, &vm)) / (2.0 * h)
            };
            if i < n {
                grad_x[i] = d * sq;
            } else {
                grad_u[i - n] = d * sq;
            }
        }
        Ok(BoundEval {
            value: top.value * sq + lw * c,
            grad_x,
            grad_u,
            grad_c: lw,
        })
    }
}

/// `w̄_min`, `s̄` and, when terminal samples are given, `w̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConstants {
    pub w_bar_min: f64,
    pub s_bar: f64,
    pub w_bar: Option<f64>,
}

/// Sampled `w̄_min = inf w̃¹(z, v, 0)` over the domain (the origin is added
/// when it belongs to the domain), `s̄ = √δ_loc`, and
/// `w̄ = max w̃¹(x, k_f(x), s)` over the supplied terminal samples.
#[allow(clippy::too_many_arguments)]
pub fn scheme_constants(
    tb: &TubeBoundSpec,
    dm: &DisturbanceModel,
    model: &SystemModel,
    design: &IlfDesign,
    domain: &BoxDomain,
    count: usize,
    seed: u64,
    terminal_samples: &[(Vector, Vector, f64)],
) -> Result<SchemeConstants> {
    if count == 0 {
        return Err(Error::Usage("scheme constants need at least one sample".into()));
    }
    let vals = par_sample(seed, count, |rng| {
        let (z, v) = domain.sample(rng);
        tb.w_tilde_delta(dm, model, 1.0, &z, &v, 0.0)
    });
    let mut w_min = f64::INFINITY;
    for v in vals {
        w_min = w_min.min(v?);
    }
    let (x0, u0) = (Vector::zeros(model.n()), Vector::zeros(model.m()));
    if domain.contains(&x0, &u0) {
        w_min = w_min.min(tb.w_tilde_delta(dm, model, 1.0, &x0, &u0, 0.0)?);
    }
    let mut w_bar = None;
    for (x, u, s) in terminal_samples {
        let w = tb.w_tilde_delta(dm, model, 1.0, x, u, *s)?;
        w_bar = Some(w_bar.map_or(w, |b: f64| b.max(w)));
    }
    Ok(SchemeConstants {
        w_bar_min: w_min,
        s_bar: design.s_bar(),
        w_bar: w_bar.map(|b| b.max(w_min)),
    })
}

/// Sampled slope `sup (σ(x, κ) − σ(z, v)) / √V_δ(x, z)` of the unit-quantile
/// spectral term, inflated by `safety` and scaled by `√ε(p)` for each level.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lw(
    dm: &DisturbanceModel,
    model: &SystemModel,
    design: &IlfDesign,
    domain: &BoxDomain,
    levels: &[f64],
    count: usize,
    seed: u64,
    safety: f64,
) -> Result<Vec<(f64, f64)>> {
    if count == 0 {
        return Err(Error::Usage("L_w estimate needs at least one sample".into()));
    }
    let probe = TubeBoundSpec {
        p_sqrt: design.p_sqrt().clone(),
        lw: vec![],
        c_delta_upper: design.c_delta_upper,
    };
    let sigma = |x: &Vector, u: &Vector| {
        crate::linalg::spectral_norm(&probe.scaled_sensitivity(dm, &model.g(x, u)))
    };
    let s_bar = design.s_bar();
    let slopes = par_sample(seed, count, |rng| {
        let (z, v) = domain.sample(rng);
        let c = s_bar * rand::Rng::random_range(rng, 0.05..=1.0);
        let x = design.sample_on_tube(rng, &z, c);
        let u = design.feedback(&x, &z, &v);
        (sigma(&x, &u) - sigma(&z, &v)) / c
    });
    let slope = slopes.into_iter().fold(0.0, f64::max) * safety;
    let mut out = Vec::new();
    for &p in levels {
        out.push((p, slope * dm.quantile(p)?.sqrt()));
    }
    Ok(out)
}

/// Everything the bound checks need.
#[derive(Clone, Copy)]
pub struct BoundContext<'a> {
    pub tb: &'a TubeBoundSpec,
    pub dm: &'a DisturbanceModel,
    pub model: &'a SystemModel,
    pub design: &'a IlfDesign,
    pub domain: &'a BoxDomain,
}

impl BoundContext<'_> {
    fn w(&self, p: f64, z: &Vector, v: &Vector, c: f64) -> f64 {
        self.tb
            .w_tilde_delta(self.dm, self.model, p, z, v, c)
            .expect("levels validated by caller")
    }
}

/// Coverage of `ℙ[V_δ(z⁺ + d_w(x, κ(x, z, v)), z⁺) ≤ w̃ᵖ(z, v, c)²] ≥ p` at
/// `instances` random `(z, v, c)`, each with `samples` draws of `θ` and of `x`
/// in the tube. Reports the smallest empirical coverage against
/// `p − 3·√(p(1 − p)/samples)`.
pub fn coverage_check(
    ctx: &BoundContext<'_>,
    p: f64,
    instances: usize,
    samples: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    if instances == 0 || samples == 0 {
        return Err(Error::Usage("coverage check needs samples".into()));
    }
    ctx.tb.lw(p)?;
    let s_bar = ctx.design.s_bar();
    let rates = par_sample(seed, instances, |rng| {
        let (z, v) = ctx.domain.sample(rng);
        let c = s_bar * rand::Rng::random::<f64>(rng);
        let bound = ctx.w(p, &z, &v, c);
        let mut hits = 0usize;
        for _ in 0..samples {
            let x = ctx.design.sample_in_tube(rng, &z, c);
            let u = ctx.design.feedback(&x, &z, &v);
            let d = ctx.dm.sample(rng, ctx.model, &x, &u);
            let dist = (ctx.tb.p_sqrt.clone() * d).norm();
            if dist <= bound * (1.0 + COVER_TOL) {
                hits += 1;
            }
        }
        (hits as f64 / samples as f64, z, v, c)
    });
    let (min_rate, z, v, c) = rates
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("instances > 0");
    let se = (p * (1.0 - p) / samples as f64).sqrt();
    let threshold = p - 3.0 * se;
    Ok(CheckOutcome::at_least(
        format!("coverage[p={p}]"),
        instances * samples,
        min_rate,
        threshold,
    )
    .with_witness(Some(format!("z={:?} v={:?} c={c}", z.as_slice(), v.as_slice()))))
}

/// Monotonicity of `w̃` in `p` (same point) and in `c` (nested tubes:
/// `w̃ᵖ(x, κ(x, z, v), c₂) ≤ w̃ᵖ(z, v, c₁)` whenever `V_δ(x, z) ≤ (c₁ − c₂)²`).
/// Returns the two outcomes with the violation counts.
pub fn monotonicity_check(
    ctx: &BoundContext<'_>,
    levels: &[f64],
    count: usize,
    seed: u64,
) -> Result<(CheckOutcome, CheckOutcome)> {
    if count == 0 {
        return Err(Error::Usage("monotonicity check needs samples".into()));
    }
    let mut lv = levels.to_vec();
    lv.sort_by(f64::total_cmp);
    for &p in &lv {
        ctx.tb.lw(p)?;
    }
    let s_bar = ctx.design.s_bar();
    let results = par_sample(seed, count, |rng| {
        let (z, v) = ctx.domain.sample(rng);
        let c1 = s_bar * rand::Rng::random::<f64>(rng);
        let c2 = c1 * rand::Rng::random::<f64>(rng);
        let x = ctx.design.sample_on_tube(rng, &z, c1 - c2);
        let u = ctx.design.feedback(&x, &z, &v);
        let outer: Vec<f64> = lv.iter().map(|&p| ctx.w(p, &z, &v, c1)).collect();
        let in_p = outer.windows(2).filter(|w| w[0] > w[1]).count();
        let mut in_c = 0;
        let mut witness = None;
        for (k, &p) in lv.iter().enumerate() {
            if ctx.w(p, &x, &u, c2) > outer[k] {
                in_c += 1;
                witness = Some(format!(
                    "p={p} z={:?} v={:?} x={:?} c1={c1} c2={c2}",
                    z.as_slice(),
                    v.as_slice(),
                    x.as_slice()
                ));
            }
        }
        (in_p, in_c, witness)
    });
    let vp: usize = results.iter().map(|r| r.0).sum();
    let vc: usize = results.iter().map(|r| r.1).sum();
    let wc = results.iter().find_map(|r| r.2.clone());
    Ok((
        CheckOutcome::at_most("monotone-in-p", count, vp as f64, 0.0),
        CheckOutcome::at_most("monotone-in-c", count, vc as f64, 0.0).with_witness(wc),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dcdc_benchmark, DcDcParams};
    use crate::sampling::stream_rng;
    use approx::assert_relative_eq;

    fn params() -> DcDcParams {
        DcDcParams {
            sample_time: 1.0,
            inductance: 1.0 / 0.0079,
            capacitance: 1.0 / 0.1505,
            resistance: 0.1505 / 0.004,
            beta: 4.798,
            gamma: 0.115,
            alpha_nominal: 0.0075,
            delta_nominal: -0.143,
        }
    }

    fn v(d: &[f64]) -> Vector {
        Vector::from_row_slice(d)
    }

    fn design() -> IlfDesign {
        IlfDesign::new(
            Matrix::from_row_slice(2, 2, &[3.2004, -7.3231, -7.3231, 25.3723]),
            Matrix::from_row_slice(1, 2, &[-0.2067, 0.3861]),
            0.82,
            1.0,
            27.6,
            0.09,
            0.2,
        )
        .unwrap()
    }

    fn domain() -> BoxDomain {
        BoxDomain {
            state_lower: vec![-1.5, -2.0],
            state_upper: vec![1.5, 2.0],
            input_lower: vec![-0.2],
            input_upper: vec![0.2],
        }
    }

    fn dm(sigma2: f64) -> DisturbanceModel {
        DisturbanceModel::new(Matrix::identity(2, 2) * sigma2, 1.6, &[0.6, 0.8], 200_000, 1)
            .unwrap()
    }

    #[test]
    fn truncated_draws_respect_radius() {
        let d = dm(0.1);
        let mut rng = stream_rng(2, 0);
        for _ in 0..10_000 {
            let th = d.sample_theta(&mut rng);
            assert!(th.norm_squared() / 0.1 <= 1.6 * 1.6 * (1.0 + 1e-12));
            assert!(d.support().contains(&th));
        }
    }

    #[test]
    fn draws_are_zero_mean() {
        let d = dm(0.1);
        let n = 1_000_000;
        let draws = par_sample(4, n, |rng| d.sample_theta(rng));
        for i in 0..2 {
            let mean = draws.iter().map(|t| t[i]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|t| (t[i] - mean).powi(2)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 4.0 * se, "mean {mean} se {se}");
        }
    }

    #[test]
    fn sample_vanishes_at_origin() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let d = dm(0.1);
        let mut rng = stream_rng(3, 0);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng, &model, &v(&[0.0, 0.0]), &v(&[0.1])), v(&[0.0, 0.0]));
        }
    }

    #[test]
    fn quantile_examples() {
        let d = dm(0.1);
        assert_relative_eq!(d.quantile(1.0).unwrap(), 2.56, max_relative = 1e-15);
        let q8 = d.quantile(0.8).unwrap();
        let q6 = d.quantile(0.6).unwrap();
        assert!(q6 <= q8 && q8 <= 2.56);
        assert!(q8 < -2.0 * 0.2f64.ln());
        assert!(d.quantile(0.0).is_err());
        assert!(d.quantile(1.1).is_err());
        // Levels between cached ones use the next cached level up.
        assert_eq!(d.quantile(0.7).unwrap(), q8);
        assert_eq!(d.quantile(0.9).unwrap(), d.quantile(1.0).unwrap());
        // Independent coverage oracle on a fresh stream of 10⁶ draws.
        let hits = par_sample(99, 1_000_000, |rng| {
            truncated_standard(rng, 2, 1.6).norm_squared() <= q8
        });
        let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
        assert!(rate >= 0.8, "coverage {rate}");
    }

    #[test]
    fn quantile_is_monotone_and_deterministic() {
        let levels = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95];
        let a = DisturbanceModel::new(Matrix::identity(2, 2), 1.6, &levels, 50_000, 8).unwrap();
        let b = DisturbanceModel::new(Matrix::identity(2, 2), 1.6, &levels, 50_000, 8).unwrap();
        assert_eq!(a.quantile_table(), b.quantile_table());
        let table = a.quantile_table();
        assert!(table.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn rejects_bad_covariance() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(DisturbanceModel::new(bad, 1.6, &[0.8], 100, 1).is_err());
        let zero = DisturbanceModel::new(Matrix::zeros(2, 2), 1.6, &[0.8], 100, 1).unwrap();
        assert!(zero.is_deterministic());
        let mut rng = stream_rng(1, 0);
        assert_eq!(zero.sample_theta(&mut rng), v(&[0.0, 0.0]));
    }

    #[test]
    fn w_hat_properties() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let d = dm(0.1);
        assert_eq!(d.w_hat(0.8, &model, &v(&[0.0, 0.0]), &v(&[0.0])).unwrap(), 0.0);
        let x = v(&[1.0, 1.0]);
        let u = v(&[0.0]);
        let w6 = d.w_hat(0.6, &model, &x, &u).unwrap();
        let w8 = d.w_hat(0.8, &model, &x, &u).unwrap();
        let w1 = d.w_hat(1.0, &model, &x, &u).unwrap();
        assert!(w6 <= w8 && w8 <= w1);
        let mut rng = stream_rng(6, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| d.sample(&mut rng, &model, &x, &u).norm() <= w8)
            .count();
        assert!(hits as f64 / n as f64 >= 0.8);
    }

    fn tube_spec(d: &IlfDesign) -> TubeBoundSpec {
        TubeBoundSpec::new(d, vec![(0.6, 0.06), (0.8, 0.105), (1.0, 0.15)]).unwrap()
    }

    #[test]
    fn w_tilde_examples() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = tube_spec(&design);
        let d = dm(1e-4);
        let z0 = v(&[0.0, 0.0]);
        let u0 = v(&[0.0]);
        assert_eq!(tb.w_tilde_delta(&d, &model, 0.8, &z0, &u0, 0.0).unwrap(), 0.0);
        let z = v(&[0.7, -0.3]);
        for (p, l) in [(1.0, 0.15), (0.6, 0.06)] {
            let a = tb.w_tilde_delta(&d, &model, p, &z, &u0, 0.1).unwrap();
            let b = tb.w_tilde_delta(&d, &model, p, &z, &u0, 0.2).unwrap();
            assert_relative_eq!((b - a) / 0.1, l, epsilon = 1e-12);
        }
        assert!(matches!(tb.w_tilde_delta(&d, &model, 0.8, &z, &u0, -0.1), Err(Error::Domain(_))));
        assert!(matches!(tb.w_tilde_delta(&d, &model, 0.7, &z, &u0, 0.1), Err(Error::Domain(_))));
        assert!(TubeBoundSpec::new(&design, vec![(0.6, 0.2), (1.0, 0.1)]).is_err());
    }

    #[test]
    fn w_tilde_coverage_at_fixed_point() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = tube_spec(&design);
        let d = dm(1e-4);
        let z = v(&[1.0, 1.0]);
        let u = v(&[0.0]);
        let w = tb.w_tilde_delta(&d, &model, 0.8, &z, &u, 0.0).unwrap();
        let mut rng = stream_rng(7, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let dw = d.sample(&mut rng, &model, &z, &u);
                let zp = model.f(&z, &u);
                design.v(&(&zp + dw), &zp) <= w * w
            })
            .count();
        assert!(hits as f64 / n as f64 >= 0.8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = tube_spec(&design);
        let d = dm(1e-4);
        let mut rng = stream_rng(8, 0);
        for _ in 0..200 {
            let (z, u) = domain().sample(&mut rng);
            let ev = tb.w_tilde_with_grad(&d, &model, 0.8, &z, &u, 0.1, 1e-6).unwrap();
            let f = |zz: &Vector| tb.w_tilde_delta(&d, &model, 0.8, zz, &u, 0.1).unwrap();
            assert_relative_eq!(ev.value, f(&z), epsilon = 1e-14);
            for i in 0..2 {
                let mut e = Vector::zeros(2);
                e[i] = 1e-6;
                let fd = (f(&(&z + &e)) - f(&(&z - &e))) / 2e-6;
                assert_relative_eq!(ev.grad_x[i], fd, epsilon = 1e-6, max_relative = 1e-4);
            }
            assert_eq!(ev.grad_c, 0.105);
        }
    }

    #[test]
    fn scheme_constants_examples() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = tube_spec(&design);
        let d = dm(1e-4);
        let sc = scheme_constants(&tb, &d, &model, &design, &domain(), 1000, 1, &[]).unwrap();
        assert_eq!(sc.w_bar_min, 0.0);
        assert_relative_eq!(sc.s_bar, 0.3, epsilon = 1e-15);
        assert!(sc.w_bar.is_none());
        let term = vec![(v(&[0.1, 0.1]), v(&[0.0]), 0.05)];
        let sc = scheme_constants(&tb, &d, &model, &design, &domain(), 1000, 1, &term).unwrap();
        assert!(sc.w_bar.unwrap() >= sc.w_bar_min);
        assert!(scheme_constants(&tb, &d, &model, &design, &domain(), 0, 1, &[]).is_err());
    }

    #[test]
    fn configured_slopes_pass_bound_checks() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = tube_spec(&design);
        let d = dm(1e-4);
        let dom = domain();
        let ctx = BoundContext {
            tb: &tb,
            dm: &d,
            model: &model,
            design: &design,
            domain: &dom,
        };
        let auto = estimate_lw(&d, &model, &design, &dom, &[0.8, 1.0], 20_000, 3, 1.1).unwrap();
        assert!(auto[1].1 <= 0.15, "{auto:?}");
        let (mp, mc) = monotonicity_check(&ctx, &[0.6, 0.8, 1.0], 10_000, 2).unwrap();
        assert!(mp.passed && mc.passed, "{} / {}", mp.line(), mc.line());
        for p in [0.8, 1.0] {
            let out = coverage_check(&ctx, p, 10, 2000, 5).unwrap();
            assert!(out.passed, "{}", out.line());
        }
    }

    #[test]
    fn too_small_slope_is_caught() {
        let (model, _, _) = dcdc_benchmark(&params(), 10).unwrap();
        let design = design();
        let tb = TubeBoundSpec::new(&design, vec![(1.0, 0.0)]).unwrap();
        let d = dm(1e-4);
        let dom = domain();
        let ctx = BoundContext {
            tb: &tb,
            dm: &d,
            model: &model,
            design: &design,
            domain: &dom,
        };
        let (_, mc) = monotonicity_check(&ctx, &[1.0], 2000, 2).unwrap();
        assert!(!mc.passed);
        assert!(mc.witness.is_some());
    }
}
