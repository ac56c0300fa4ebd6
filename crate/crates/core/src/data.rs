//! Datasets and the synthetic generators used by the experiments.
//!
//! Two-moons geometry: the outer moon is `(cos t, sin t)` with label 0, the inner moon is
//! `(1 - cos t, 0.5 - sin t)` with label 1, `t ~ U[0, pi]`, followed by isotropic Gaussian
//! noise. Class sizes are `n / 2` (label 0) and `n - n / 2` (label 1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihood::Observation;
use crate::points::Points;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major real targets, one row of length `O` per input.
    Real(Points),
    Class { labels: Vec<usize>, num_classes: usize },
}

/// Paired inputs and targets with per-row split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Points,
    targets: Targets,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(inputs: Points, targets: Targets) -> Result<Self> {
        let n = inputs.len();
        match &targets {
            Targets::Real(y) => {
                if y.len() != n && !(n == 0 && y.is_empty()) {
                    return Err(Error::shape(format!("{n} inputs but {} targets", y.len())));
                }
                if !y.all_finite() {
                    return Err(Error::Domain("non-finite regression target".into()));
                }
            }
            Targets::Class { labels, num_classes } => {
                if labels.len() != n {
                    return Err(Error::shape(format!("{n} inputs but {} labels", labels.len())));
                }
                if let Some(bad) = labels.iter().find(|&&c| c >= *num_classes) {
                    return Err(Error::Domain(format!("label {bad} outside 0..{num_classes}")));
                }
            }
        }
        if !inputs.all_finite() {
            return Err(Error::Domain("non-finite input".into()));
        }
        Ok(Dataset {
            inputs,
            targets,
            splits: vec![Split::Train; n],
        })
    }

    pub fn regression(inputs: Points, targets: Points) -> Result<Self> {
        Dataset::new(inputs, Targets::Real(targets))
    }

    pub fn classification(inputs: Points, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Dataset::new(inputs, Targets::Class { labels, num_classes })
    }

    /// A dataset without observations (prior-only fits).
    pub fn empty_regression(input_dim: usize, output_dim: usize) -> Self {
        Dataset {
            inputs: Points::empty(input_dim),
            targets: Targets::Real(Points::empty(output_dim)),
            splits: Vec::new(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.splits = vec![split; self.len()];
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &Points {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Real(_) => Task::Regression,
            Targets::Class { .. } => Task::Classification,
        }
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        match &self.targets {
            Targets::Real(y) => Observation::Real(y.row(i)),
            Targets::Class { labels, .. } => Observation::Class(labels[i]),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Class { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    /// Rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let targets = match &self.targets {
            Targets::Real(y) => Targets::Real(y.select(indices)),
            Targets::Class { labels, num_classes } => Targets::Class {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        };
        Dataset {
            inputs: self.inputs.select(indices),
            targets,
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.select(&idx)
    }

    /// Appends the rows of `other`, keeping its split tags.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let targets = match (&self.targets, &other.targets) {
            (Targets::Real(a), Targets::Real(b)) => Targets::Real(a.concat(b)?),
            (
                Targets::Class { labels: a, num_classes },
                Targets::Class {
                    labels: b,
                    num_classes: nb,
                },
            ) if num_classes == nb => Targets::Class {
                labels: a.iter().chain(b).copied().collect(),
                num_classes: *num_classes,
            },
            _ => return Err(Error::shape("cannot concatenate datasets of different kinds")),
        };
        let mut splits = self.splits.clone();
        splits.extend_from_slice(&other.splits);
        Ok(Dataset {
            inputs: self.inputs.concat(&other.inputs)?,
            targets,
            splits,
        })
    }
}

/// `y = sin(2 pi x) + eps`, `x ~ U([-1, -0.5] u [0.5, 1])`, `eps ~ N(0, noise_std^2)`.
pub fn gen_sine(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("sine dataset needs at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let magnitude: f64 = rng.random_range(0.5..=1.0);
        let x = if rng.random_bool(0.5) { magnitude } else { -magnitude };
        let eps: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push((2.0 * std::f64::consts::PI * x).sin() + noise_std * eps);
    }
    Dataset::regression(Points::from_scalars(&xs), Points::from_scalars(&ys))
}

pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::config("two-moons needs at least two points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n / 2;
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let (x, y, label) = if i < n_outer {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        pts.push(x + noise * ex);
        pts.push(y + noise * ey);
        labels.push(label);
    }
    // interleave classes so minibatches see both
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let ds = Dataset::classification(Points::new(2, pts)?, labels, 2)?;
    Ok(ds.select(&order))
}

/// Linear-Gaussian data on standard-normal features: `y = w.x + b + eps`.
pub fn gen_linear_features(n: usize, dim: usize, noise_std: f64, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let truth: Vec<f64> = (0..=dim).map(|_| normal.sample(&mut rng)).collect();
    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let f = crate::nn::dot(&truth[..dim], &x) + truth[dim];
        ys.push(f + noise_std * normal.sample(&mut rng));
        xs.extend(x);
    }
    Ok((
        Dataset::regression(Points::new(dim, xs)?, Points::from_scalars(&ys))?,
        truth,
    ))
}
