//! Versioned fit.json: the explored hyperparameter points with their
//! modes and weights - enough to re-derive marginals, samples and scores
//! given the configuration and data, without storing sparse factors.

use anyhow::{bail, Context, Result};
use occulgm_core::components::BoundModel;
use occulgm_core::inference::{
    approx_at_mode, ExploreTimings, LaplaceFit, Strategy, ThetaPoint,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredPoint {
    pub theta: Vec<f64>,
    pub z: Vec<f64>,
    pub log_post: f64,
    pub log_int_weight: f64,
    pub weight: f64,
    pub mode: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub theta_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    pub log_post_mode: f64,
    pub n_latent: usize,
    pub metric: Vec<Vec<f64>>,
    pub eig_values: Vec<f64>,
    pub eig_vectors: Vec<Vec<f64>>,
    pub hessian_fallback: bool,
    pub grid_step: f64,
    pub points: Vec<StoredPoint>,
    pub warnings: Vec<String>,
    /// Resolved hyperparameter schema (names, transforms, priors, inits)
    /// so defaults used by the fit are on record.
    pub hyper_entries: Vec<occulgm_core::model::HyperEntry>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub assemble_s: f64,
    pub optimize_s: f64,
    pub explore_s: f64,
    pub sample_s: f64,
    pub total_s: f64,
}

fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    nalgebra::DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

impl FitFile {
    pub fn from_fit(
        fit: &LaplaceFit,
        bound: &BoundModel,
        config_hash: &str,
        seed: u64,
        timings: Timings,
    ) -> Self {
        Self {
            format_version: FIT_FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            strategy: fit.strategy_used,
            theta_names: fit.theta_names.clone(),
            theta_mode: fit.theta_mode.clone(),
            log_post_mode: fit.log_post_mode,
            n_latent: fit.n_latent,
            metric: to_rows(&fit.metric),
            eig_values: fit.eig_values.clone(),
            eig_vectors: to_rows(&fit.eig_vectors),
            hessian_fallback: fit.hessian_fallback,
            grid_step: fit.opts_grid_step,
            points: fit
                .points
                .iter()
                .map(|p| StoredPoint {
                    theta: p.theta.clone(),
                    z: p.z.clone(),
                    log_post: p.log_post,
                    log_int_weight: p.log_int_weight,
                    weight: p.weight,
                    mode: p.approx.mode.clone(),
                })
                .collect(),
            warnings: fit.warnings.clone(),
            hyper_entries: bound.hyper.entries.clone(),
            timings,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .with_context(|| format!("cannot create `{}`", path.display()))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read fit file `{}`", path.display()))?;
        let file: FitFile = serde_json::from_str(&text)
            .with_context(|| format!("malformed fit file `{}`", path.display()))?;
        if file.format_version != FIT_FORMAT_VERSION {
            bail!(
                "fit file `{}` has format version {} but this binary expects {}",
                path.display(),
                file.format_version,
                FIT_FORMAT_VERSION
            );
        }
        Ok(file)
    }

    /// Rebuild the in-memory fit: one curvature evaluation and sparse
    /// factorization per stored point, no optimization.
    pub fn rebuild(&self, bound: &BoundModel) -> Result<LaplaceFit> {
        if self.n_latent != bound.n_latent {
            bail!(
                "fit file has {} latent nodes but the model binds {}",
                self.n_latent,
                bound.n_latent
            );
        }
        let mut points = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let obs = bound.obs_model(&p.theta)?;
            let approx = approx_at_mode(bound, &p.theta, &obs, p.mode.clone())?;
            points.push(ThetaPoint {
                theta: p.theta.clone(),
                z: p.z.clone(),
                log_post: p.log_post,
                log_int_weight: p.log_int_weight,
                weight: p.weight,
                approx,
            });
        }
        Ok(LaplaceFit {
            strategy_used: self.strategy,
            theta_names: self.theta_names.clone(),
            theta_mode: self.theta_mode.clone(),
            log_post_mode: self.log_post_mode,
            points,
            metric: from_rows(&self.metric),
            eig_values: self.eig_values.clone(),
            eig_vectors: from_rows(&self.eig_vectors),
            hessian_fallback: self.hessian_fallback,
            n_latent: self.n_latent,
            opts_grid_step: self.grid_step,
            warnings: self.warnings.clone(),
            nm_evals: 0,
            timings: ExploreTimings::default(),
        })
    }
}
