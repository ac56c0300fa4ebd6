//! Jacobian projection, projected curvature and prior-variance-bounded truncation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::PosteriorFactors;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::GpPrior;
use crate::likelihood::Likelihood;
use crate::nn::{sum_in_order, MlpSpec, ParamVector, VJP_CHUNK};
use crate::points::Points;
use crate::train::stream_rng;

/// `J(C) 1 / |J(C) 1|`, or a seeded random unit vector when that product vanishes.
pub fn initial_lanczos_vector(spec: &MlpSpec, map: &ParamVector, context: &Points, seed: u64) -> Result<DVector<f64>> {
    let ones = vec![1.0; spec.num_params()];
    let v = spec.stacked_jvp(map, context, &ones)?;
    let norm = v.norm();
    if norm > 0.0 && norm.is_finite() {
        return Ok(v / norm);
    }
    log::warn!("J(C) 1 vanished; starting Lanczos from a seeded random vector");
    let mut rng = stream_rng(seed, 2);
    let r: DVector<f64> = DVector::from_fn(v.len(), |_, _| StandardNormal.sample(&mut rng));
    let n = r.norm();
    Ok(r / n)
}

/// `J(C)^T L`, one column per column of `L`.
pub fn project_jacobian(spec: &MlpSpec, map: &ParamVector, context: &Points, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let o = spec.output_dim();
    if l.nrows() != context.len() * o {
        return Err(Error::shape(format!(
            "factor has {} rows, context needs {}",
            l.nrows(),
            context.len() * o
        )));
    }
    let traces: Result<Vec<_>> = context.rows().map(|x| spec.trace(map, x)).collect();
    let traces = traces?;
    let p = spec.num_params();
    let columns: Result<Vec<Vec<f64>>> = (0..l.ncols())
        .into_par_iter()
        .map(|j| {
            let col = l.column(j);
            let mut acc = vec![0.0; p];
            for (i, trace) in traces.iter().enumerate() {
                let cot: Vec<f64> = (0..o).map(|k| col[i * o + k]).collect();
                spec.vjp_traced(map, trace, &cot, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut out = DMatrix::zeros(p, l.ncols());
    for (j, c) in columns?.into_iter().enumerate() {
        out.column_mut(j).copy_from_slice(&c);
    }
    Ok(out)
}

/// Stacked `J(X) T` (`n * O x k`), rows ordered `(point, output)`.
pub fn jacobian_times(spec: &MlpSpec, map: &ParamVector, xs: &Points, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let o = spec.output_dim();
    let blocks: Result<Vec<DMatrix<f64>>> = (0..xs.len())
        .into_par_iter()
        .map(|i| spec.jvp_columns(map, xs.row(i), t))
        .collect();
    let mut out = DMatrix::zeros(xs.len() * o, t.ncols());
    for (i, b) in blocks?.into_iter().enumerate() {
        out.rows_mut(i * o, o).copy_from(&b);
    }
    Ok(out)
}

/// Curvature of the linearized objective restricted to `range(U_M)`.
#[derive(Debug, Clone)]
pub struct ProjectedCurvature {
    /// `D_M^2 + sum_i (J_i U_M)^T Lambda_i (J_i U_M)`.
    pub a: DMatrix<f64>,
    pub u_m: DMatrix<f64>,
    /// Singular values of `M`, descending.
    pub d_m: DVector<f64>,
}

impl ProjectedCurvature {
    pub fn rank(&self) -> usize {
        self.d_m.len()
    }
}

/// Left singular vectors and singular values of `m`, descending, with values below
/// `eps_rel * max` discarded.
pub fn thin_svd(m: &DMatrix<f64>, eps_rel: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("projected Jacobian has non-finite entries"));
    }
    if m.ncols() == 0 || m.nrows() == 0 {
        return Ok((DMatrix::zeros(m.nrows(), 0), DVector::zeros(0)));
    }
    let svd = m.clone().try_svd(true, false, f64::EPSILON, 0).ok_or_else(|| Error::numerical("SVD did not converge"))?;
    let u = svd.u.expect("left singular vectors requested");
    let max = svd.singular_values.max();
    let mut order: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| max > 0.0 && svd.singular_values[i] > eps_rel * max)
        .collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u_m = DMatrix::from_columns(&order.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>());
    let d = DVector::from_iterator(order.len(), order.iter().map(|&i| svd.singular_values[i]));
    Ok((if order.is_empty() { DMatrix::zeros(m.nrows(), 0) } else { u_m }, d))
}

/// `sum_i G_i^T Lambda_i G_i` with `G_i = J(x_i) U`, summed over fixed-size chunks in order.
pub(crate) fn data_curvature(
    spec: &MlpSpec,
    map: &ParamVector,
    data: &Dataset,
    likelihood: &Likelihood,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let r = u.ncols();
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Result<Vec<Vec<f64>>> = idx
        .par_chunks(VJP_CHUNK)
        .map(|chunk| {
            let mut acc = DMatrix::zeros(r, r);
            for &i in chunk {
                let trace = spec.trace(map, data.inputs().row(i))?;
                let lam = likelihood.curvature(trace.output());
                let g = spec.jvp_columns_traced(map, &trace, u)?;
                acc += g.transpose() * lam * &g;
            }
            Ok(acc.as_slice().to_vec())
        })
        .collect();
    Ok(DMatrix::from_vec(r, r, sum_in_order(parts?, r * r)))
}

pub fn assemble_projected_curvature(
    m: &DMatrix<f64>,
    spec: &MlpSpec,
    map: &ParamVector,
    data: &Dataset,
    likelihood: &Likelihood,
    eps_rel: f64,
) -> Result<ProjectedCurvature> {
    if m.nrows() != spec.num_params() {
        return Err(Error::shape("projected Jacobian row count differs from parameter count"));
    }
    crate::train::check_model(spec, likelihood, data)?;
    let (u_m, d_m) = thin_svd(m, eps_rel)?;
    let mut a = DMatrix::from_diagonal(&d_m.map(|d| d * d));
    if !data.is_empty() && u_m.ncols() > 0 {
        a += data_curvature(spec, map, data, likelihood, &u_m)?;
    }
    let a = (&a + a.transpose()) * 0.5;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("projected curvature has non-finite entries"));
    }
    Ok(ProjectedCurvature { a, u_m, d_m })
}

/// Slack on the prior-variance bound used while scanning, well inside the
/// `1e-8` tolerance promised on the output.
fn bound_slack(prior_var: f64) -> f64 {
    (1e-9 * prior_var.abs()).min(5e-9)
}

/// Eigendecomposes `A`, forms `S = U_M U_A D_A^{+1/2}` with eigenvalues ascending and
/// drops the smallest `k` columns for the first `k` at which the predicted marginal
/// variance at every context point is bounded by the prior variance there.
pub fn truncate_and_factor(
    pc: &ProjectedCurvature,
    prior: &GpPrior,
    spec: &MlpSpec,
    map: &ParamVector,
    context: &Points,
    eps_rel: f64,
) -> Result<PosteriorFactors> {
    let r = pc.rank();
    let p = spec.num_params();
    if pc.u_m.nrows() != p || pc.a.nrows() != r {
        return Err(Error::shape("projected curvature does not match the network"));
    }
    let eig = SymmetricEigen::new(pc.a.clone());
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let clamped: Vec<f64> = order
        .iter()
        .map(|&i| {
            let v = eig.eigenvalues[i];
            if max > 0.0 && v > eps_rel * max {
                v
            } else {
                0.0
            }
        })
        .collect();
    let zero_count = clamped.iter().take_while(|&&v| v == 0.0).count();

    // U_A with columns in ascending order, scaled by D_A^{+1/2}
    let mut scaled = DMatrix::zeros(r, r);
    for (c, &i) in order.iter().enumerate() {
        if clamped[c] > 0.0 {
            scaled.set_column(c, &(eig.eigenvectors.column(i) / clamped[c].sqrt()));
        }
    }
    let s_full = &pc.u_m * &scaled;
    let js = jacobian_times(spec, map, context, &pc.u_m)? * &scaled;
    let prior_var = prior.kernel.diag(context);

    let rows = js.nrows();
    let mut suffix = DMatrix::<f64>::zeros(rows, r + 1);
    for c in (0..r).rev() {
        for i in 0..rows {
            suffix[(i, c)] = suffix[(i, c + 1)] + js[(i, c)] * js[(i, c)];
        }
    }
    let fits = |k: usize| (0..rows).all(|i| suffix[(i, k)] <= prior_var[i] + bound_slack(prior_var[i]));
    let k = (zero_count..=r).find(|&k| fits(k)).unwrap_or(r);
    if k == r && r > 0 {
        log::warn!("every curvature direction violated the prior-variance bound; returning a rank-0 covariance");
    }
    log::debug!("truncation dropped {k} of {r} directions ({zero_count} with zero curvature)");

    Ok(PosteriorFactors {
        spec: spec.clone(),
        map: map.clone(),
        s: s_full.columns(k, r - k).into_owned(),
        eigenvalues: clamped[k..].to_vec(),
        truncation: k,
        projected_rank: r,
        context: context.clone(),
    })
}
