//! Independent brute-force references: dense tensor-grid integration of
//! the exact posterior and an adaptive random-walk Metropolis sampler.
//! Both share the likelihood kernel with the engine, so disagreements
//! isolate the Laplace approximation rather than the model. Nothing here
//! is used by the inference path itself.

mod mh;

pub use mh::{ess, gelman_rubin, mh_sampler, mh_sampler_with_obs, MhOptions, MhResult};

use crate::components::BoundModel;
use crate::error::{Error, Result};
use crate::likelihood::ObsModel;

/// Posterior moments and evidence from a dense grid.
#[derive(Debug, Clone)]
pub struct GridOracleResult {
    /// Latent node labels followed by hyperparameter names.
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub log_evidence: f64,
    pub resolution: usize,
}

pub const GRID_ORACLE_MAX_DIM: usize = 3;

/// Joint log-density log pi(y, x, theta) with every constant included.
fn log_joint(bound: &BoundModel, x: &[f64], theta: &[f64]) -> Result<f64> {
    let obs = bound.obs_model(theta)?;
    let eta = bound.projector.mul_vec(x);
    let mut ll = 0.0;
    for i in 0..obs.n_obs() {
        ll += obs.loglik(i, eta[i]);
    }
    let q = bound.precision(theta);
    let factor = q.factorize()?;
    let n = bound.n_latent as f64;
    let log_prior_x = 0.5 * factor.log_det()
        - 0.5 * q.quad_form(x)
        - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(ll + log_prior_x + bound.hyper.log_prior(theta))
}

/// Tensor-grid evaluation of the exact (un-approximated) posterior over
/// (latent nodes, hyperparameters). Total dimension is capped at three.
pub fn grid_posterior(
    bound: &BoundModel,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<GridOracleResult> {
    let n_lat = bound.n_latent;
    let dim = n_lat + bound.hyper.dim();
    if dim > GRID_ORACLE_MAX_DIM {
        return Err(Error::DimensionTooLarge(dim, GRID_ORACLE_MAX_DIM));
    }
    if !bound.constraints.is_empty() {
        return Err(Error::InvalidModel(
            "the grid oracle does not handle constrained components".into(),
        ));
    }
    if bounds.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{} bounds for {dim} dimensions",
            bounds.len()
        )));
    }
    if resolution < 3 {
        return Err(Error::DomainError("resolution must be at least 3".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::DomainError("bounds must be finite and ordered".into()));
        }
    }

    let steps: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo) / (resolution - 1) as f64)
        .collect();
    let total = resolution.pow(dim as u32);
    let coord = |flat: usize, d: usize| -> f64 {
        let idx = (flat / resolution.pow(d as u32)) % resolution;
        bounds[d].0 + idx as f64 * steps[d]
    };

    // Pass 1: the maximum of the log-joint for stable exponentiation.
    let mut max_lj = f64::NEG_INFINITY;
    let mut values = vec![0.0f64; total];
    let mut x = vec![0.0; n_lat];
    let mut theta = vec![0.0; dim - n_lat];
    for flat in 0..total {
        for d in 0..n_lat {
            x[d] = coord(flat, d);
        }
        for d in n_lat..dim {
            theta[d - n_lat] = coord(flat, d);
        }
        let lj = log_joint(bound, &x, &theta)?;
        values[flat] = lj;
        if lj > max_lj {
            max_lj = lj;
        }
    }

    // Pass 2: trapezoid accumulation of mass and moments.
    let log_cell: f64 = steps.iter().map(|s| s.ln()).sum();
    let mut mass = 0.0f64;
    let mut first = vec![0.0f64; dim];
    let mut second = vec![0.0f64; dim];
    for flat in 0..total {
        // Trapezoid: boundary slots carry half weight per dimension.
        let mut w = (values[flat] - max_lj).exp();
        for d in 0..dim {
            let idx = (flat / resolution.pow(d as u32)) % resolution;
            if idx == 0 || idx == resolution - 1 {
                w *= 0.5;
            }
        }
        mass += w;
        for d in 0..dim {
            let v = coord(flat, d);
            first[d] += w * v;
            second[d] += w * v * v;
        }
    }
    let log_evidence = max_lj + mass.ln() + log_cell;
    let means: Vec<f64> = first.iter().map(|f| f / mass).collect();
    let sds: Vec<f64> = second
        .iter()
        .zip(&means)
        .map(|(s, m)| (s / mass - m * m).max(0.0).sqrt())
        .collect();

    let mut names = bound.node_labels.clone();
    names.extend(bound.hyper.names());
    Ok(GridOracleResult {
        names,
        means,
        sds,
        log_evidence,
        resolution,
    })
}

/// log of the integral over the latent field at fixed theta, by dense
/// quadrature: the reference for the Laplace estimate of log pi(y, theta).
pub fn latent_quadrature(
    bound: &BoundModel,
    theta: &[f64],
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<f64> {
    let n_lat = bound.n_latent;
    if n_lat > GRID_ORACLE_MAX_DIM {
        return Err(Error::DimensionTooLarge(n_lat, GRID_ORACLE_MAX_DIM));
    }
    if bounds.len() != n_lat {
        return Err(Error::DimensionMismatch("one bound per latent node".into()));
    }
    let steps: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo) / (resolution - 1) as f64)
        .collect();
    let total = resolution.pow(n_lat as u32);
    let obs = bound.obs_model(theta)?;
    let q = bound.precision(theta);
    let factor = q.factorize()?;
    let log_norm =
        0.5 * factor.log_det() - 0.5 * n_lat as f64 * (2.0 * std::f64::consts::PI).ln();

    let mut vals = Vec::with_capacity(total);
    let mut x = vec![0.0; n_lat];
    for flat in 0..total {
        for d in 0..n_lat {
            let idx = (flat / resolution.pow(d as u32)) % resolution;
            x[d] = bounds[d].0 + idx as f64 * steps[d];
        }
        let eta = bound.projector.mul_vec(&x);
        let mut ll = 0.0;
        for i in 0..obs.n_obs() {
            ll += obs.loglik(i, eta[i]);
        }
        let mut w = 0.0;
        for d in 0..n_lat {
            let idx = (flat / resolution.pow(d as u32)) % resolution;
            if idx == 0 || idx == resolution - 1 {
                w += std::f64::consts::LN_2;
            }
        }
        vals.push(ll + log_norm - 0.5 * q.quad_form(&x) - w);
    }
    let log_cell: f64 = steps.iter().map(|s| s.ln()).sum();
    Ok(crate::links::logsumexp(&vals) + log_cell)
}
