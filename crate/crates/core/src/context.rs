//! Context-point distributions for the RKHS estimator and the covariance context set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Where context points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextSampler {
    /// Independent uniform draws from the box `[lo, hi]`.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Tensor grid with `per_dim` evenly spaced points per axis, endpoints included.
    /// Ignores the requested count.
    Grid { lo: Vec<f64>, hi: Vec<f64>, per_dim: usize },
    /// Scrambling-free Halton sequence mapped onto the box, starting after `skip` points.
    Halton {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default)]
        skip: usize,
    },
    /// Uniform draws with replacement from a fixed pool.
    FromDataset { pool: Points },
}

fn check_box(lo: &[f64], hi: &[f64]) -> Result<()> {
    if lo.is_empty() || lo.len() != hi.len() {
        return Err(Error::config("context box bounds need matching, non-empty lo and hi"));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
        return Err(Error::config("context box needs finite bounds with lo <= hi"));
    }
    Ok(())
}

/// `count` evenly spaced points on `[lo, hi]`; a single point sits at the midpoint.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Radical inverse of `index` in base `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

impl ContextSampler {
    pub fn validate(&self) -> Result<()> {
        match self {
            ContextSampler::UniformBox { lo, hi } => check_box(lo, hi),
            ContextSampler::Grid { lo, hi, per_dim } => {
                check_box(lo, hi)?;
                if *per_dim == 0 {
                    return Err(Error::config("grid context needs at least one point per axis"));
                }
                Ok(())
            }
            ContextSampler::Halton { lo, hi, .. } => {
                check_box(lo, hi)?;
                if lo.len() > PRIMES.len() {
                    return Err(Error::config(format!(
                        "Halton context supports at most {} dimensions",
                        PRIMES.len()
                    )));
                }
                Ok(())
            }
            ContextSampler::FromDataset { pool } => {
                if pool.is_empty() {
                    Err(Error::config("context pool is empty"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextSampler::UniformBox { lo, .. }
            | ContextSampler::Grid { lo, .. }
            | ContextSampler::Halton { lo, .. } => lo.len(),
            ContextSampler::FromDataset { pool } => pool.dim(),
        }
    }

    /// True when repeated calls return the same points regardless of the seed.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, ContextSampler::Grid { .. } | ContextSampler::Halton { .. })
    }

    /// Draws `count` context points (a grid returns its full tensor product).
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Points> {
        self.validate()?;
        let dim = self.dim();
        match self {
            ContextSampler::UniformBox { lo, hi } => {
                let mut data = Vec::with_capacity(count * dim);
                for _ in 0..count {
                    for d in 0..dim {
                        let u: f64 = rng.random();
                        data.push(lo[d] + (hi[d] - lo[d]) * u);
                    }
                }
                Points::new(dim, data)
            }
            ContextSampler::Grid { lo, hi, per_dim } => {
                let axes: Vec<Vec<f64>> = (0..dim).map(|d| linspace(lo[d], hi[d], *per_dim)).collect();
                let total = per_dim.pow(dim as u32);
                let mut data = Vec::with_capacity(total * dim);
                for flat in 0..total {
                    let mut rem = flat;
                    let mut point = vec![0.0; dim];
                    // last axis varies fastest
                    for d in (0..dim).rev() {
                        point[d] = axes[d][rem % per_dim];
                        rem /= per_dim;
                    }
                    data.extend(point);
                }
                Points::new(dim, data)
            }
            ContextSampler::Halton { lo, hi, skip } => {
                let mut data = Vec::with_capacity(count * dim);
                for i in 0..count {
                    let index = (skip + i + 1) as u64;
                    for d in 0..dim {
                        data.push(lo[d] + (hi[d] - lo[d]) * radical_inverse(index, PRIMES[d]));
                    }
                }
                Points::new(dim, data)
            }
            ContextSampler::FromDataset { pool } => {
                let mut out = Points::empty(dim);
                for _ in 0..count {
                    out.push(pool.row(rng.random_range(0..pool.len())))?;
                }
                Ok(out)
            }
        }
    }

    /// Seeded convenience wrapper around [`ContextSampler::sample`].
    pub fn sample_seeded(&self, count: usize, seed: u64) -> Result<Points> {
        self.sample(count, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}
