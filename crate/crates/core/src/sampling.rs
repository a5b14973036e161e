//! Seeded sampling utilities: box domains, uniform balls and a deterministic
//! parallel sampler.
//!
//! Parallel work is split into a fixed number of chunks, each drawing from its
//! own ChaCha stream of the same seed, so results do not depend on the thread
//! count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;

pub type Rng64 = ChaCha8Rng;

/// Number of independent streams used by [`par_sample`].
pub const CHUNKS: usize = 8;

/// Stream for replication or worker `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `count` samples with `draw`, in parallel over [`CHUNKS`] streams.
/// The output order and values depend only on `seed` and `count`.
pub fn par_sample<T, F>(seed: u64, count: usize, draw: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut Rng64) -> T + Sync,
{
    let per = count.div_ceil(CHUNKS);
    let parts: Vec<Vec<T>> = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let start = (chunk * per).min(count);
            let end = ((chunk + 1) * per).min(count);
            let mut rng = stream_rng(seed, chunk as u64);
            (start..end).map(|_| draw(&mut rng)).collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

pub fn standard_normal(rng: &mut Rng64, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Uniform point in the closed Euclidean unit ball of `ℝⁿ`.
pub fn unit_ball(rng: &mut Rng64, n: usize) -> Vector {
    if n == 0 {
        return Vector::zeros(0);
    }
    loop {
        let d = standard_normal(rng, n);
        let norm = d.norm();
        if norm > 0.0 {
            let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
            return d * (r / norm);
        }
    }
}

/// Uniform point on the unit sphere of `ℝⁿ`.
pub fn unit_sphere(rng: &mut Rng64, n: usize) -> Vector {
    loop {
        let d = standard_normal(rng, n);
        let norm = d.norm();
        if norm > 0.0 {
            return d / norm;
        }
    }
}

/// Axis-aligned box of states and inputs standing in for the compact set of
/// admissible reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDomain {
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
}

impl BoxDomain {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        check_dim("domain state_lower", n, self.state_lower.len())?;
        check_dim("domain state_upper", n, self.state_upper.len())?;
        check_dim("domain input_lower", m, self.input_lower.len())?;
        check_dim("domain input_upper", m, self.input_upper.len())?;
        let pairs = self
            .state_lower
            .iter()
            .zip(&self.state_upper)
            .chain(self.input_lower.iter().zip(&self.input_upper));
        for (lo, hi) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "domain bounds must be finite with lower ≤ upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.state_lower.len()
    }

    pub fn m(&self) -> usize {
        self.input_lower.len()
    }

    pub fn sample(&self, rng: &mut Rng64) -> (Vector, Vector) {
        let draw = |lo: &[f64], hi: &[f64], rng: &mut Rng64| {
            Vector::from_iterator(
                lo.len(),
                lo.iter().zip(hi).map(|(&l, &h)| {
                    if h > l {
                        rng.random_range(l..=h)
                    } else {
                        l
                    }
                }),
            )
        };
        let x = draw(&self.state_lower, &self.state_upper, rng);
        let u = draw(&self.input_lower, &self.input_upper, rng);
        (x, u)
    }

    pub fn contains(&self, x: &Vector, u: &Vector) -> bool {
        let inside = |v: &Vector, lo: &[f64], hi: &[f64]| {
            v.iter().zip(lo.iter().zip(hi)).all(|(&a, (&l, &h))| l <= a && a <= h)
        };
        inside(x, &self.state_lower, &self.state_upper)
            && inside(u, &self.input_lower, &self.input_upper)
    }
}
