//! Nested-Laplace inference: a damped Newton solve for the latent field
//! conditional on hyperparameters, the Laplace estimate of the
//! hyperparameter log-posterior, exploration of that posterior, and
//! Gaussian-mixture marginals and samples.

mod explore;
mod marginals;

pub use explore::{optimize_and_explore, ExploreOptions, ExploreTimings, LaplaceFit, Strategy, ThetaPoint};
pub use marginals::{
    hyper_marginals, latent_marginals, linear_marginal, marginal_log_likelihood, mixture_quantile,
    sample_posterior, NodeMarginal, ParamSummary, SampleSet,
};

use crate::components::BoundModel;
use crate::error::{Error, Result};
use crate::likelihood::ObsModel;
use crate::sparse::{Constraint, LdlFactor, SparseSym};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Inner-optimizer settings.
#[derive(Debug, Clone, Copy)]
pub struct InnerOptions {
    pub max_iter: usize,
    /// Relative objective-change tolerance.
    pub obj_tol: f64,
    /// Gradient criterion: |grad| <= grad_tol * (1 + |x|).
    pub grad_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            obj_tol: 1e-8,
            grad_tol: 1e-6,
        }
    }
}

/// Constraint-handling state attached to a conditional Gaussian: the
/// kriging columns V = H^-1 C^T and the dense factor of S = C H^-1 C^T.
#[derive(Debug, Clone)]
pub struct ConstraintInfo {
    pub rows: Vec<Constraint>,
    /// n x k matrix of H^-1 C^T columns.
    pub v: DMatrix<f64>,
    pub s_chol: Cholesky<f64, Dyn>,
    pub log_det_s_h: f64,
    pub log_det_s_q: f64,
}

impl ConstraintInfo {
    /// x <- x - V S^-1 (C x): condition a draw (or mean) on C x = 0.
    pub fn project(&self, x: &mut [f64]) {
        let k = self.rows.len();
        let mut cx = DVector::zeros(k);
        for (r, c) in self.rows.iter().enumerate() {
            cx[r] = c.dot(x);
        }
        let sol = self.s_chol.solve(&cx);
        for i in 0..x.len() {
            let mut acc = 0.0;
            for r in 0..k {
                acc += self.v[(i, r)] * sol[r];
            }
            x[i] -= acc;
        }
    }

    /// Per-node variance reduction diag(V S^-1 V^T).
    pub fn variance_correction(&self) -> Vec<f64> {
        let k = self.rows.len();
        let n = self.v.nrows();
        // X = L_S^-1 V^T, correction_i = sum_r X[r,i]^2.
        let x = self
            .s_chol
            .l()
            .solve_lower_triangular(&self.v.transpose())
            .expect("S factor is positive definite");
        let mut out = vec![0.0; n];
        for i in 0..n {
            for r in 0..k {
                out[i] += x[(r, i)] * x[(r, i)];
            }
        }
        out
    }

    /// Variance reduction for a single linear functional a^T x, given
    /// va = V^T a.
    pub fn linear_correction(&self, va: &DVector<f64>) -> f64 {
        let sol = self.s_chol.solve(va);
        va.dot(&sol)
    }
}

/// The conditional Gaussian approximation at one hyperparameter point.
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    pub factor: LdlFactor,
    pub log_det_h: f64,
    /// log-likelihood at the mode (binomial coefficients included).
    pub loglik: f64,
    /// x*^T Q x* at the mode.
    pub prior_quad: f64,
    pub log_det_q: f64,
    pub constraint: Option<ConstraintInfo>,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub grad_norm: f64,
    /// Diagonal jitter added to make H factorizable (0 in the usual case).
    pub jitter_added: f64,
    /// Objective trace across accepted steps (non-decreasing).
    pub obj_trace: Vec<f64>,
}

impl GaussianApprox {
    /// Marginal variances diag(H^-1) with the constraint correction.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let n = self.mode.len();
        use rayon::prelude::*;
        let mut vars: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| self.factor.inverse_diagonal_entry(i))
            .collect();
        if let Some(ci) = &self.constraint {
            for (v, corr) in vars.iter_mut().zip(ci.variance_correction()) {
                *v = (*v - corr).max(0.0);
            }
        }
        vars
    }

    /// Mean and variance of a^T x under this conditional Gaussian.
    pub fn linear_moments(&self, idx: &[usize], val: &[f64]) -> (f64, f64) {
        let n = self.mode.len();
        let mut a = vec![0.0; n];
        let mut mean = 0.0;
        for (&i, &v) in idx.iter().zip(val) {
            a[i] = v;
            mean += v * self.mode[i];
        }
        let hinv_a = self.factor.solve(&a);
        let mut var = 0.0;
        for (&i, &v) in idx.iter().zip(val) {
            var += v * hinv_a[i];
        }
        if let Some(ci) = &self.constraint {
            let k = ci.rows.len();
            let mut va = DVector::zeros(k);
            for r in 0..k {
                let mut acc = 0.0;
                for (&i, &v) in idx.iter().zip(val) {
                    acc += v * ci.v[(i, r)];
                }
                va[r] = acc;
            }
            var -= ci.linear_correction(&va);
        }
        (mean, var.max(0.0))
    }
}

struct ObjParts {
    loglik: f64,
    objective: f64,
}

fn objective(
    obs: &dyn ObsModel,
    q: &SparseSym,
    a: &crate::sparse::Projector,
    x: &[f64],
) -> ObjParts {
    let eta = a.mul_vec(x);
    let loglik: f64 = (0..obs.n_obs()).map(|i| obs.loglik(i, eta[i])).sum();
    let quad = q.quad_form(x);
    ObjParts {
        loglik,
        objective: loglik - 0.5 * quad,
    }
}

/// Find the (constrained) mode of the latent field given theta by damped
/// Newton iterations with step-halving on the exact objective. Negative
/// observation curvature is floored at zero so the Newton metric stays
/// positive definite despite the non-log-concave zero branch.
pub fn inner_mode(
    bound: &BoundModel,
    theta: &[f64],
    x0: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<GaussianApprox> {
    let obs = bound.obs_model(theta)?;
    inner_mode_with_obs(bound, theta, &obs, x0, opts)
}

/// Same as `inner_mode` but with a caller-supplied observation model
/// (used by tests and the reference integrators).
pub fn inner_mode_with_obs(
    bound: &BoundModel,
    theta: &[f64],
    obs: &dyn ObsModel,
    x0: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<GaussianApprox> {
    let n = bound.n_latent;
    let a = &bound.projector;
    assert_eq!(obs.n_obs(), a.nrows());
    let q = bound.precision(theta);
    let sym_q = bound.symbolic_q(theta);
    let (q_factor, _) = q.factorize_with_jitter(sym_q)?;

    // Dense (C C^T)^-1 for the reduced-gradient criterion.
    let k = bound.constraints.len();
    let cct_chol = if k > 0 {
        let mut cct = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                let ci = &bound.constraints[i];
                let cj = &bound.constraints[j];
                // sparse dot of constraint rows
                let mut map = std::collections::BTreeMap::new();
                for (&ix, &v) in ci.idx.iter().zip(&ci.val) {
                    map.insert(ix, v);
                }
                for (&ix, &v) in cj.idx.iter().zip(&cj.val) {
                    if let Some(w) = map.get(&ix) {
                        acc += w * v;
                    }
                }
                cct[(i, j)] = acc;
            }
        }
        Some(Cholesky::new(cct).ok_or_else(|| {
            Error::InvalidModel("constraint rows are linearly dependent".into())
        })?)
    } else {
        None
    };

    let mut x = match x0 {
        Some(x0) => {
            let mut x = x0.to_vec();
            // A warm start must satisfy the constraints.
            if k > 0 {
                project_onto_constraints(&bound.constraints, cct_chol.as_ref().unwrap(), &mut x);
            }
            x
        }
        None => vec![0.0; n],
    };

    let mut parts = objective(obs, &q, a, &x);
    let mut obj_trace = vec![parts.objective];
    let mut max_jitter = 0.0f64;
    let sym_h = bound.symbolic_h(theta);

    let mut converged = false;
    let mut iterations = 0;
    let mut final_step_norm = 0.0;
    let mut grad_norm = f64::INFINITY;
    let mut small_obj_change = false;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let eta = a.mul_vec(&x);
        let mut d1 = vec![0.0; obs.n_obs()];
        let mut w = vec![0.0; obs.n_obs()];
        for i in 0..obs.n_obs() {
            let (_, g, h) = obs.derivs(i, eta[i]);
            d1[i] = g;
            w[i] = (-h).max(0.0);
        }
        let mut grad = vec![0.0; n];
        a.add_t_mul_vec(&d1, &mut grad);
        let mut qx = vec![0.0; n];
        q.mul_vec(&x, &mut qx);
        for i in 0..n {
            grad[i] -= qx[i];
        }

        // Reduced gradient (constraint multipliers removed).
        let mut gred = grad.clone();
        if let Some(cct) = &cct_chol {
            project_onto_constraints(&bound.constraints, cct, &mut gred);
        }
        grad_norm = gred.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let grad_ok = grad_norm <= opts.grad_tol * (1.0 + xnorm);
        if grad_ok && small_obj_change {
            converged = true;
            break;
        }

        // Assemble and factor H = Q + A^T W A. When the damped step finds
        // no ascent (flat or indefinite directions at extreme
        // hyperparameters), retry with a growing ridge on H, which bends
        // the step toward plain gradient ascent.
        let mut ht = q.to_triplets();
        ht.append_shifted(&a.atwa(&w).build().to_triplets(), 0);
        let h = ht.build();
        let diag_scale = h.diag().iter().fold(1.0f64, |acc, d| acc.max(d.abs()));
        let mut accepted = false;
        let mut ridge = 0.0f64;
        for _attempt in 0..6 {
            let h_try = if ridge == 0.0 {
                h.clone()
            } else {
                let mut t = h.to_triplets();
                for i in 0..n {
                    t.push(i, i, ridge * diag_scale);
                }
                t.build()
            };
            let factor = if ridge == 0.0 {
                let (f, jit) = h_try.factorize_with_jitter(sym_h)?;
                max_jitter = max_jitter.max(jit);
                f
            } else {
                match h_try.factorize() {
                    Ok(f) => f,
                    Err(_) => {
                        ridge = (ridge * 100.0).max(1e-8);
                        continue;
                    }
                }
            };

            // Newton target mu = x + H^-1 grad, kriging-corrected so the
            // iterate stays on the constraint manifold.
            let step = factor.solve(&grad);
            let mut mu: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            if k > 0 {
                let cinfo = constraint_info(&bound.constraints, &factor, &q_factor, n);
                cinfo.project(&mut mu);
            }
            let delta: Vec<f64> = mu.iter().zip(&x).map(|(m, xi)| m - xi).collect();

            // Step-halving line search on the exact objective.
            let mut alpha = 1.0;
            for _ in 0..40 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&delta)
                    .map(|(xi, d)| xi + alpha * d)
                    .collect();
                let trial_parts = objective(obs, &q, a, &trial);
                if trial_parts.objective.is_finite() && trial_parts.objective > parts.objective {
                    let delta_obj = trial_parts.objective - parts.objective;
                    small_obj_change = delta_obj < opts.obj_tol * (1.0 + parts.objective.abs());
                    x = trial;
                    final_step_norm = alpha * delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    parts = trial_parts;
                    obj_trace.push(parts.objective);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
            ridge = (ridge * 100.0).max(1e-8);
        }
        if !accepted {
            // Numerically at the top already: accept if the gradient
            // criterion holds, otherwise surface the failure.
            if grad_ok || grad_norm <= opts.grad_tol.sqrt() * (1.0 + xnorm) {
                converged = true;
                break;
            }
            return Err(Error::NonConvergence {
                iterations,
                objective: parts.objective,
            });
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            objective: parts.objective,
        });
    }

    let mut approx = approx_at_mode(bound, theta, obs, x)?;
    approx.iterations = iterations;
    approx.final_step_norm = final_step_norm;
    approx.grad_norm = grad_norm;
    approx.jitter_added = approx.jitter_added.max(max_jitter);
    approx.obj_trace = obj_trace;
    Ok(approx)
}

/// The conditional Gaussian at a known mode: curvature, sparse factor,
/// log-determinants and constraint state, with no Newton iterations. Used
/// to finish the inner solve and to rebuild fits from serialized modes.
pub fn approx_at_mode(
    bound: &BoundModel,
    theta: &[f64],
    obs: &dyn ObsModel,
    x: Vec<f64>,
) -> Result<GaussianApprox> {
    let n = bound.n_latent;
    let a = &bound.projector;
    let q = bound.precision(theta);
    let (q_factor, _) = q.factorize_with_jitter(bound.symbolic_q(theta))?;
    let eta = a.mul_vec(&x);
    let mut w = vec![0.0; obs.n_obs()];
    for i in 0..obs.n_obs() {
        let (_, _, h) = obs.derivs(i, eta[i]);
        w[i] = (-h).max(0.0);
    }
    let mut ht = q.to_triplets();
    ht.append_shifted(&a.atwa(&w).build().to_triplets(), 0);
    let h = ht.build();
    let (h_factor, jitter) = h.factorize_with_jitter(bound.symbolic_h(theta))?;
    let cinfo = if bound.constraints.is_empty() {
        None
    } else {
        Some(constraint_info(&bound.constraints, &h_factor, &q_factor, n))
    };
    let log_det_h = h_factor.log_det();
    let parts = objective(obs, &q, a, &x);
    Ok(GaussianApprox {
        prior_quad: q.quad_form(&x),
        loglik: parts.loglik,
        mode: x,
        factor: h_factor,
        log_det_h,
        log_det_q: q_factor.log_det(),
        constraint: cinfo,
        iterations: 0,
        final_step_norm: 0.0,
        grad_norm: 0.0,
        jitter_added: jitter,
        obj_trace: Vec::new(),
    })
}

/// Remove the span of the constraint rows: x <- x - C^T (C C^T)^-1 C x.
fn project_onto_constraints(
    constraints: &[Constraint],
    cct_chol: &Cholesky<f64, Dyn>,
    x: &mut [f64],
) {
    let k = constraints.len();
    let mut cx = DVector::zeros(k);
    for (r, c) in constraints.iter().enumerate() {
        cx[r] = c.dot(x);
    }
    let sol = cct_chol.solve(&cx);
    for (r, c) in constraints.iter().enumerate() {
        for (&i, &v) in c.idx.iter().zip(&c.val) {
            x[i] -= v * sol[r];
        }
    }
}

fn constraint_info(
    constraints: &[Constraint],
    h_factor: &LdlFactor,
    q_factor: &LdlFactor,
    n: usize,
) -> ConstraintInfo {
    let k = constraints.len();
    let mut v = DMatrix::zeros(n, k);
    let mut s_h = DMatrix::zeros(k, k);
    let mut s_q = DMatrix::zeros(k, k);
    for r in 0..k {
        let dense = constraints[r].to_dense(n);
        let col_h = h_factor.solve(&dense);
        let col_q = q_factor.solve(&dense);
        for i in 0..n {
            v[(i, r)] = col_h[i];
        }
        for r2 in 0..k {
            s_h[(r2, r)] = constraints[r2].dot(&col_h);
            s_q[(r2, r)] = constraints[r2].dot(&col_q);
        }
    }
    // Symmetrize against round-off before factoring.
    let s_h = (&s_h + s_h.transpose()) * 0.5;
    let s_q = (&s_q + s_q.transpose()) * 0.5;
    let chol_h = Cholesky::new(s_h).expect("C H^-1 C^T must be positive definite");
    let chol_q = Cholesky::new(s_q).expect("C Q^-1 C^T must be positive definite");
    let ld = |c: &Cholesky<f64, Dyn>| 2.0 * c.l_dirty().diagonal().map(|v| v.ln()).sum();
    ConstraintInfo {
        rows: constraints.to_vec(),
        log_det_s_h: ld(&chol_h),
        log_det_s_q: ld(&chol_q),
        v,
        s_chol: chol_h,
    }
}

/// Condition a prior draw on C x = 0 by kriging under the same precision
/// that generated it.
pub fn project_sample_onto_constraints(
    factor: &LdlFactor,
    constraints: &[Constraint],
    x: &mut [f64],
) {
    let ci = constraint_info(constraints, factor, factor, x.len());
    ci.project(x);
}

/// Laplace estimate of log pi(theta | y) up to a constant:
/// loglik(x*) + log prior(x*) - log approx(x*) + log prior(theta), with the
/// constrained-Gaussian corrections when constraints are present.
pub fn log_posterior_theta(bound: &BoundModel, theta: &[f64], approx: &GaussianApprox) -> f64 {
    let mut lp = approx.loglik + 0.5 * (approx.log_det_q - approx.log_det_h)
        - 0.5 * approx.prior_quad;
    if let Some(ci) = &approx.constraint {
        lp += 0.5 * (ci.log_det_s_q - ci.log_det_s_h);
    }
    lp + bound.hyper.log_prior(theta)
}
