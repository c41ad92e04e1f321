//! Outer loop over hyperparameters: derivative-free optimization of the
//! Laplace log-posterior, a central-difference Hessian at the mode, and
//! grid or central-composite exploration along scaled eigenvector
//! coordinates.

use super::{inner_mode, log_posterior_theta, GaussianApprox, InnerOptions};
use crate::components::BoundModel;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Ccd,
    /// Grid for up to four hyperparameters, CCD above.
    Auto,
}

#[derive(Debug, Clone, Copy)]
pub struct ExploreOptions {
    pub strategy: Strategy,
    /// z-step of the grid walk.
    pub grid_step: f64,
    /// Stop expanding the grid when the log-posterior drops this far.
    pub log_drop: f64,
    /// CCD scaling: design points sit at radius f0 * sqrt(dim).
    pub ccd_f0: f64,
    /// Central-difference step for the numeric Hessian.
    pub hess_step: f64,
    pub inner: InnerOptions,
    /// Hard cap on explored points.
    pub max_points: usize,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Auto,
            grid_step: 0.75,
            log_drop: 2.5,
            ccd_f0: 1.1,
            hess_step: 0.01,
            inner: InnerOptions::default(),
            max_points: 4000,
        }
    }
}

/// One explored hyperparameter point.
pub struct ThetaPoint {
    pub theta: Vec<f64>,
    /// Position in the scaled eigen coordinates.
    pub z: Vec<f64>,
    pub log_post: f64,
    /// Log of the design (integration) weight attached to the point.
    pub log_int_weight: f64,
    /// Normalized mixture weight.
    pub weight: f64,
    pub approx: GaussianApprox,
}

/// Wall-clock phase durations of one fit.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExploreTimings {
    pub optimize_s: f64,
    pub explore_s: f64,
}

/// The explored hyperparameter posterior with its conditional Gaussians.
pub struct LaplaceFit {
    pub strategy_used: Strategy,
    pub theta_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    pub log_post_mode: f64,
    pub points: Vec<ThetaPoint>,
    /// Negative Hessian of the log-posterior at the mode (the metric).
    pub metric: DMatrix<f64>,
    pub eig_values: Vec<f64>,
    pub eig_vectors: DMatrix<f64>,
    pub hessian_fallback: bool,
    pub n_latent: usize,
    pub opts_grid_step: f64,
    pub warnings: Vec<String>,
    pub nm_evals: usize,
    pub timings: ExploreTimings,
}

impl LaplaceFit {
    pub fn dim(&self) -> usize {
        self.theta_mode.len()
    }

    pub fn mode_point(&self) -> &ThetaPoint {
        self.points
            .iter()
            .find(|p| p.z.iter().all(|&z| z == 0.0))
            .expect("the centre point is always explored")
    }
}

struct LpEvaluator<'a> {
    bound: &'a BoundModel,
    inner: InnerOptions,
}

impl<'a> LpEvaluator<'a> {
    fn eval(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<(f64, GaussianApprox)> {
        let approx = inner_mode(self.bound, theta, warm, &self.inner)?;
        let lp = log_posterior_theta(self.bound, theta, &approx);
        Ok((lp, approx))
    }
}

/// Nelder-Mead maximization of lp over theta. Returns the best point and
/// the number of evaluations. Deterministic for fixed inputs.
fn nelder_mead(
    eval: &LpEvaluator,
    start: &[f64],
    max_iter: usize,
) -> Result<(Vec<f64>, f64, Vec<f64>, usize)> {
    let p = start.len();
    let mut n_evals = 0usize;

    let f = |theta: &[f64], warm: Option<&[f64]>, n_evals: &mut usize| -> (f64, Vec<f64>) {
        *n_evals += 1;
        match eval.eval(theta, warm) {
            Ok((lp, approx)) => (lp, approx.mode),
            Err(_) => (f64::NEG_INFINITY, Vec::new()),
        }
    };

    // Initial simplex: start plus steps along each axis.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    let (f0, m0) = f(start, None, &mut n_evals);
    if !f0.is_finite() {
        return Err(Error::OptimFailure(
            "log-posterior not finite at the starting values".into(),
        ));
    }
    let mut best_mode = m0;
    let mut warm = Some(best_mode.clone());
    simplex.push((start.to_vec(), f0));
    for j in 0..p {
        let mut v = start.to_vec();
        v[j] += 0.5;
        let (fj, mj) = f(&v, warm.as_deref(), &mut n_evals);
        if fj > simplex[0].1 && !mj.is_empty() {
            best_mode = mj;
            warm = Some(best_mode.clone());
        }
        simplex.push((v, fj));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let fbest = simplex[0].1;
        let fworst = simplex[p].1;
        if fbest - fworst < 1e-6 * (1.0 + fbest.abs()) {
            break;
        }
        // Centroid of all but the worst.
        let mut centroid = vec![0.0; p];
        for v in simplex.iter().take(p) {
            for j in 0..p {
                centroid[j] += v.0[j] / p as f64;
            }
        }
        let reflect: Vec<f64> = (0..p)
            .map(|j| centroid[j] + alpha * (centroid[j] - simplex[p].0[j]))
            .collect();
        let (fr, mr) = f(&reflect, warm.as_deref(), &mut n_evals);
        if fr > fbest {
            if !mr.is_empty() {
                best_mode = mr;
                warm = Some(best_mode.clone());
            }
            let expand: Vec<f64> = (0..p)
                .map(|j| centroid[j] + gamma * (centroid[j] - simplex[p].0[j]))
                .collect();
            let (fe, me) = f(&expand, warm.as_deref(), &mut n_evals);
            if fe > fr {
                if !me.is_empty() {
                    best_mode = me;
                    warm = Some(best_mode.clone());
                }
                simplex[p] = (expand, fe);
            } else {
                simplex[p] = (reflect, fr);
            }
        } else if fr > simplex[p - 1].1 {
            simplex[p] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..p)
                .map(|j| centroid[j] + rho * (simplex[p].0[j] - centroid[j]))
                .collect();
            let (fc, _) = f(&contract, warm.as_deref(), &mut n_evals);
            if fc > fworst {
                simplex[p] = (contract, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for j in 0..p {
                        v.0[j] = best[j] + sigma * (v.0[j] - best[j]);
                    }
                    let (fs, _) = f(&v.0.clone(), warm.as_deref(), &mut n_evals);
                    v.1 = fs;
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let (theta, lp) = simplex.swap_remove(0);
    Ok((theta, lp, best_mode, n_evals))
}

/// Central-difference negative Hessian of lp at the mode.
fn numeric_neg_hessian(
    eval: &LpEvaluator,
    theta: &[f64],
    lp0: f64,
    warm: &[f64],
    h: f64,
) -> Result<DMatrix<f64>> {
    let p = theta.len();
    // All displaced evaluations, done in parallel.
    let mut tasks: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        for s in [1.0, -1.0] {
            let mut t = theta.to_vec();
            t[j] += s * h;
            tasks.push(t);
        }
    }
    for i in 0..p {
        for j in (i + 1)..p {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut t = theta.to_vec();
                t[i] += si * h;
                t[j] += sj * h;
                tasks.push(t);
            }
        }
    }
    let values: Vec<f64> = tasks
        .par_iter()
        .map(|t| eval.eval(t, Some(warm)).map(|(lp, _)| lp))
        .collect::<Result<_>>()?;
    let mut hess = DMatrix::zeros(p, p);
    for j in 0..p {
        let (fp, fm) = (values[2 * j], values[2 * j + 1]);
        hess[(j, j)] = (fp - 2.0 * lp0 + fm) / (h * h);
    }
    let mut idx = 2 * p;
    for i in 0..p {
        for j in (i + 1)..p {
            let (fpp, fpm, fmp, fmm) = (
                values[idx],
                values[idx + 1],
                values[idx + 2],
                values[idx + 3],
            );
            idx += 4;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(-hess)
}

/// Signs of the half-fraction 2^(p-1) factorial (product of all levels
/// fixed at +1); the full factorial for p <= 5.
fn factorial_designs(p: usize) -> Vec<Vec<f64>> {
    let full = 1usize << p;
    let mut out = Vec::new();
    for mask in 0..full {
        let signs: Vec<f64> = (0..p)
            .map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        if p > 5 {
            let prod: f64 = signs.iter().product();
            if prod < 0.0 {
                continue;
            }
        }
        out.push(signs);
    }
    out
}

/// Optimize the hyperparameter posterior and explore it.
pub fn optimize_and_explore(bound: &BoundModel, opts: &ExploreOptions) -> Result<LaplaceFit> {
    let p = bound.hyper.dim();
    if p > crate::model::MAX_GRID_DIM {
        return Err(Error::InvalidModel(format!(
            "{p} hyperparameters exceed the supported limit of {}",
            crate::model::MAX_GRID_DIM
        )));
    }
    let strategy = match opts.strategy {
        Strategy::Auto => {
            if p <= 4 {
                Strategy::Grid
            } else {
                Strategy::Ccd
            }
        }
        s => s,
    };
    let eval = LpEvaluator {
        bound,
        inner: opts.inner,
    };
    let mut warnings = Vec::new();

    let t_start = std::time::Instant::now();

    // Degenerate case: no hyperparameters at all.
    if p == 0 {
        let (lp, approx) = eval.eval(&[], None)?;
        return Ok(LaplaceFit {
            strategy_used: strategy,
            theta_names: vec![],
            theta_mode: vec![],
            log_post_mode: lp,
            points: vec![ThetaPoint {
                theta: vec![],
                z: vec![],
                log_post: lp,
                log_int_weight: 0.0,
                weight: 1.0,
                approx,
            }],
            metric: DMatrix::zeros(0, 0),
            eig_values: vec![],
            eig_vectors: DMatrix::zeros(0, 0),
            hessian_fallback: false,
            n_latent: bound.n_latent,
            opts_grid_step: opts.grid_step,
            warnings,
            nm_evals: 1,
            timings: ExploreTimings {
                optimize_s: t_start.elapsed().as_secs_f64(),
                explore_s: 0.0,
            },
        });
    }

    // 1. Mode of lp(theta) by Nelder-Mead.
    let start = bound.hyper.init();
    let (theta_mode, lp_mode, center_mode, nm_evals) =
        nelder_mead(&eval, &start, 200 + 80 * p)?;
    let optimize_s = t_start.elapsed().as_secs_f64();
    let t_explore = std::time::Instant::now();

    // 2. Numeric Hessian, eigen metric; identity fallback when not PD.
    let neg_hess = numeric_neg_hessian(&eval, &theta_mode, lp_mode, &center_mode, opts.hess_step)?;
    let sym = (&neg_hess + neg_hess.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let (metric, eig_values, eig_vectors, fallback) = if min_ev <= 1e-8 {
        warnings.push(format!(
            "hyperparameter Hessian not positive definite (min eigenvalue {min_ev:.3e}); \
             falling back to the identity metric"
        ));
        (
            DMatrix::identity(p, p),
            vec![1.0; p],
            DMatrix::identity(p, p),
            true,
        )
    } else {
        (
            sym,
            eig.eigenvalues.iter().cloned().collect(),
            eig.eigenvectors.clone(),
            false,
        )
    };

    // theta(z) = mode + V diag(1/sqrt(lambda)) z.
    let theta_of_z = |z: &[f64]| -> Vec<f64> {
        let mut t = theta_mode.clone();
        for (col, zc) in z.iter().enumerate() {
            for r in 0..p {
                t[r] += eig_vectors[(r, col)] * zc / eig_values[col].sqrt();
            }
        }
        t
    };

    // 3. Exploration points in z space.
    struct RawPoint {
        z: Vec<f64>,
        log_int_weight: f64,
    }
    let mut raw: Vec<RawPoint> = Vec::new();
    let mut evaluated: Vec<(f64, GaussianApprox)> = Vec::new();

    match strategy {
        Strategy::Grid | Strategy::Auto => {
            // Breadth-first lattice fill: keep a point when its
            // log-posterior is within log_drop of the mode.
            let dz = opts.grid_step;
            let mut seen: BTreeSet<Vec<i64>> = BTreeSet::new();
            let mut accepted: Vec<(Vec<i64>, f64, GaussianApprox)> = Vec::new();
            let mut frontier: Vec<Vec<i64>> = vec![vec![0; p]];
            seen.insert(vec![0; p]);
            while !frontier.is_empty() && accepted.len() < opts.max_points {
                // Evaluate the frontier deterministically in parallel.
                let results: Vec<(Vec<i64>, Result<(f64, GaussianApprox)>)> = frontier
                    .par_iter()
                    .map(|key| {
                        let z: Vec<f64> = key.iter().map(|&k| k as f64 * dz).collect();
                        let theta = theta_of_z(&z);
                        (key.clone(), eval.eval(&theta, Some(&center_mode)))
                    })
                    .collect();
                let mut next = Vec::new();
                for (key, res) in results {
                    match res {
                        Ok((lp, approx)) if lp_mode - lp <= opts.log_drop => {
                            accepted.push((key.clone(), lp, approx));
                            for j in 0..p {
                                for s in [-1i64, 1] {
                                    let mut nk = key.clone();
                                    nk[j] += s;
                                    if seen.insert(nk.clone()) {
                                        next.push(nk);
                                    }
                                }
                            }
                        }
                        Ok(_) => {}
                        Err(_) => {
                            warnings.push(format!("inner solve failed at grid point {key:?}"));
                        }
                    }
                }
                next.sort();
                frontier = next;
            }
            if accepted.len() >= opts.max_points {
                warnings.push(format!(
                    "grid exploration truncated at {} points",
                    opts.max_points
                ));
            }
            accepted.sort_by(|a, b| a.0.cmp(&b.0));
            for (key, lp, approx) in accepted {
                let z: Vec<f64> = key.iter().map(|&k| k as f64 * dz).collect();
                raw.push(RawPoint {
                    z,
                    log_int_weight: 0.0,
                });
                evaluated.push((lp, approx));
            }
        }
        Strategy::Ccd => {
            let f0 = opts.ccd_f0;
            let r = f0 * (p as f64).sqrt();
            let mut zs: Vec<Vec<f64>> = vec![vec![0.0; p]];
            for signs in factorial_designs(p) {
                zs.push(signs.iter().map(|s| s * f0).collect());
            }
            for j in 0..p {
                for s in [1.0, -1.0] {
                    let mut z = vec![0.0; p];
                    z[j] = s * r;
                    zs.push(z);
                }
            }
            let n_design = (zs.len() - 1) as f64;
            let log_2pi_half_p = 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln();
            // Weights integrate a standard Gaussian in z exactly.
            let delta_center = (1.0 - 1.0 / (f0 * f0)).ln() + log_2pi_half_p;
            let delta_design = (p as f64 / (n_design * r * r)).ln() + 0.5 * r * r + log_2pi_half_p;

            let results: Vec<Result<(f64, GaussianApprox)>> = zs
                .par_iter()
                .map(|z| eval.eval(&theta_of_z(z), Some(&center_mode)))
                .collect();
            for (i, (z, res)) in zs.into_iter().zip(results).enumerate() {
                match res {
                    Ok((lp, approx)) => {
                        raw.push(RawPoint {
                            z,
                            log_int_weight: if i == 0 { delta_center } else { delta_design },
                        });
                        evaluated.push((lp, approx));
                    }
                    Err(_) => warnings.push(format!("inner solve failed at CCD point {i}")),
                }
            }
        }
    }

    if raw.is_empty() {
        return Err(Error::OptimFailure("no exploration point succeeded".into()));
    }

    // 4. Normalized mixture weights.
    let log_w: Vec<f64> = raw
        .iter()
        .zip(&evaluated)
        .map(|(r, e)| e.0 + r.log_int_weight)
        .collect();
    let lse = crate::links::logsumexp(&log_w);
    let mut points = Vec::with_capacity(raw.len());
    for ((r, (lp, approx)), lw) in raw.into_iter().zip(evaluated).zip(log_w) {
        let theta = theta_of_z(&r.z);
        points.push(ThetaPoint {
            theta,
            z: r.z,
            log_post: lp,
            log_int_weight: r.log_int_weight,
            weight: (lw - lse).exp(),
            approx,
        });
    }

    Ok(LaplaceFit {
        strategy_used: strategy,
        theta_names: bound.hyper.names(),
        theta_mode,
        log_post_mode: lp_mode,
        points,
        metric,
        eig_values,
        eig_vectors,
        hessian_fallback: fallback,
        n_latent: bound.n_latent,
        opts_grid_step: opts.grid_step,
        warnings,
        nm_evals,
        timings: ExploreTimings {
            optimize_s,
            explore_s: t_explore.elapsed().as_secs_f64(),
        },
    })
}
