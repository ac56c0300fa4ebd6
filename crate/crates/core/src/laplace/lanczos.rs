//! Low-rank pseudo-inverse factor of a PSD operator from a fully reorthogonalized Lanczos run.
//!
//! After `k` steps the basis `Q` and tridiagonal `T = Q^T K Q` give `L = Q V diag(theta)^{-1/2}`
//! over the eigenpairs `(theta, V)` of `T` with `theta > eps_rel * theta_max`, so that
//! `L L^T` is the pseudo-inverse of `K` on the captured Krylov subspace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramOperator;
use crate::train::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorthogonalization {
    /// Two Gram-Schmidt passes against every previous basis vector.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanczosConfig {
    /// Upper bound on iterations; the run also stops at the operator dimension.
    pub max_rank: usize,
    /// Breakdown threshold on `beta` relative to the running norm estimate.
    pub tolerance: f64,
    /// Relative eigenvalue cutoff used for every pseudo-inversion in the posterior.
    pub eps_rel: f64,
    pub reorthogonalization: Reorthogonalization,
    /// Continue from a fresh random direction orthogonal to the basis after a breakdown,
    /// so invariant subspaces do not cap the achievable rank.
    pub restart: bool,
    /// Seed for the restart directions and the start-vector fallback.
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        LanczosConfig {
            max_rank: 500,
            tolerance: 1e-12,
            eps_rel: 1e-10,
            reorthogonalization: Reorthogonalization::Full,
            restart: true,
            seed: 0,
        }
    }
}

impl LanczosConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rank == 0 {
            return Err(Error::config("Lanczos rank must be at least 1"));
        }
        if !(self.eps_rel > 0.0 && self.eps_rel < 1.0) {
            return Err(Error::config("eps_rel must lie in (0, 1)"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config("Lanczos tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// A symmetric linear operator available only through products.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self * v)
    }
}

impl SymmetricOperator for GramOperator {
    fn dim(&self) -> usize {
        GramOperator::dim(self)
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.matvec(v)
    }
}

/// `L` with `L L^T ~ K^+`, plus the retained Ritz values (descending).
#[derive(Debug, Clone)]
pub struct PinvFactor {
    pub l: DMatrix<f64>,
    pub ritz_values: Vec<f64>,
    pub iterations: usize,
}

impl PinvFactor {
    pub fn rank(&self) -> usize {
        self.l.ncols()
    }
}

fn orthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(w);
            w.axpy(-c, q, 1.0);
        }
    }
}

pub fn lanczos_pinv_factor(op: &impl SymmetricOperator, v0: &DVector<f64>, config: &LanczosConfig) -> Result<PinvFactor> {
    config.validate()?;
    let n = op.dim();
    if v0.len() != n {
        return Err(Error::shape(format!("start vector of length {}, operator of size {n}", v0.len())));
    }
    let v0_norm = v0.norm();
    if !(v0_norm > 0.0 && v0_norm.is_finite()) {
        return Err(Error::Domain("Lanczos start vector must be nonzero and finite".into()));
    }
    let steps = config.max_rank.min(n);
    let mut rng = stream_rng(config.seed, 1);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut norm_est: f64 = 0.0;
    let mut q = v0 / v0_norm;

    while basis.len() < steps {
        let mut w = op.apply(&q)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("operator produced non-finite values in Lanczos"));
        }
        let alpha = q.dot(&w);
        let prev_beta = betas.last().copied().unwrap_or(0.0);
        basis.push(q);
        alphas.push(alpha);
        orthogonalize(&mut w, &basis);
        let beta = w.norm();
        norm_est = norm_est.max(alpha.abs() + beta + prev_beta);
        if basis.len() == steps {
            break;
        }
        if beta > config.tolerance * norm_est && norm_est > 0.0 {
            betas.push(beta);
            q = w / beta;
            continue;
        }
        if !config.restart {
            break;
        }
        let mut fresh = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        fresh /= fresh.norm();
        orthogonalize(&mut fresh, &basis);
        let rest = fresh.norm();
        if rest < 1e-8 {
            break;
        }
        betas.push(0.0);
        q = fresh / rest;
    }

    let k = basis.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let theta_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..k)
        .filter(|&i| theta_max > 0.0 && eig.eigenvalues[i] > config.eps_rel * theta_max)
        .collect();
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let q_mat = DMatrix::from_columns(&basis);
    let mut l = DMatrix::zeros(n, keep.len());
    let mut ritz_values = Vec::with_capacity(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let theta = eig.eigenvalues[i];
        let col = &q_mat * eig.eigenvectors.column(i) / theta.sqrt();
        l.set_column(c, &col);
        ritz_values.push(theta);
    }
    log::debug!("Lanczos: {k} iterations, rank {} retained", keep.len());
    Ok(PinvFactor {
        l,
        ritz_values,
        iterations: k,
    })
}

/// Dense pseudo-inverse of a symmetric PSD matrix with the same relative cutoff.
pub fn dense_pinv(matrix: &DMatrix<f64>, eps_rel: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let inv = eig
        .eigenvalues
        .map(|v| if max > 0.0 && v > eps_rel * max { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}
