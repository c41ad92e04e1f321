//! Adaptive random-walk Metropolis on the exact joint posterior of
//! (latent field, hyperparameters).
//!
//! Hard constraints C x = 0 are handled by reparameterizing each
//! constrained component through an orthonormal null-space basis, so the
//! chain explores exactly the constrained posterior the engine reports.
//! Latent coordinates update in blocks with per-block scale adaptation
//! during burn-in (frozen afterwards); hyperparameters update jointly.
//! Component log-determinants use closed forms or pre-computed spectra,
//! never refactorizations inside the chain.

use crate::components::{Block, BlockFill, BoundModel};
use crate::error::{Error, Result};
use crate::likelihood::ObsModel;
use crate::model::Transform;
use crate::rng::{standard_normals, stream_rng, Stream};
use crate::sparse::{Constraint, SparseSym};
use nalgebra::DMatrix;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct MhOptions {
    pub iters: usize,
    pub burn_in: usize,
    /// Record every `thin`-th post-burn-in state.
    pub thin: usize,
    pub seed: u64,
    /// Latent coordinates per proposal block.
    pub block_size: usize,
    /// Extra latent node indices whose chains should be stored.
    pub track_nodes: Vec<usize>,
}

impl Default for MhOptions {
    fn default() -> Self {
        Self {
            iters: 60_000,
            burn_in: 15_000,
            thin: 5,
            seed: 1,
            block_size: 25,
            track_nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhResult {
    /// Posterior means/sds of every latent node (original coordinates).
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    /// Hyperparameter summaries on the transformed scale.
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub theta_names: Vec<String>,
    /// Stored chains for hyperparameters and tracked nodes.
    pub chains: BTreeMap<String, Vec<f64>>,
    pub ess: BTreeMap<String, f64>,
    pub mcse: BTreeMap<String, f64>,
    /// Post-burn-in acceptance rate per block (latent blocks then theta).
    pub accept_rates: Vec<f64>,
    pub n_recorded: usize,
}

impl MhResult {
    pub fn chain(&self, name: &str) -> Result<&[f64]> {
        self.chains
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::ComponentNotFound(name.to_string()))
    }

    /// Write stored chains as CSV (one column per tracked quantity).
    pub fn write_chain_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let names: Vec<&String> = self.chains.keys().collect();
        writeln!(
            w,
            "{}",
            names
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        for i in 0..self.n_recorded {
            let row: Vec<String> = names
                .iter()
                .map(|n| format!("{}", self.chains[*n][i]))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Closed-form (up to theta-free constants) log-determinant of one
/// component block of the reduced prior precision B^T Q B.
enum LogDetEval {
    Constant,
    /// df * ln tau.
    ScaledTau { df: f64, tau: usize },
    /// Two stacked scaled blocks (BYM).
    ScaledPairTau { df_u: f64, tau_u: usize, n_v: f64, tau_v: usize },
    Ar1 { n: f64, tau: usize, rho: usize },
    /// Matern spectrum: logdet Q = m ln(tau/4pi) + sum 2 ln(kappa^2+nu)
    /// - m ln kappa^2 + logdet C.
    Matern { nus: Vec<f64>, m: f64, tau: usize, kappa: usize },
    SpaceTime {
        nus: Vec<f64>,
        m: f64,
        n_t: f64,
        tau: usize,
        kappa: usize,
        rho: usize,
    },
}

impl LogDetEval {
    fn eval(&self, theta: &[f64], hyper: &crate::model::HyperSpec) -> f64 {
        let tau_of = |idx: usize| hyper.entries[idx].transform.precision_value(theta[idx]);
        match self {
            LogDetEval::Constant => 0.0,
            LogDetEval::ScaledTau { df, tau } => df * tau_of(*tau).ln(),
            LogDetEval::ScaledPairTau {
                df_u,
                tau_u,
                n_v,
                tau_v,
            } => df_u * tau_of(*tau_u).ln() + n_v * tau_of(*tau_v).ln(),
            LogDetEval::Ar1 { n, tau, rho } => {
                let r = Transform::FisherRho.to_natural(theta[*rho]);
                n * tau_of(*tau).ln() - (n - 1.0) * (1.0 - r * r).ln()
            }
            LogDetEval::Matern { nus, m, tau, kappa } => {
                let k2 = (2.0 * theta[*kappa]).exp();
                let scale = tau_of(*tau) / (4.0 * std::f64::consts::PI);
                let spectrum: f64 = nus.iter().map(|nu| 2.0 * (k2 + nu).ln()).sum();
                m * scale.ln() + spectrum - m * k2.ln()
            }
            LogDetEval::SpaceTime {
                nus,
                m,
                n_t,
                tau,
                kappa,
                rho,
            } => {
                let k2 = (2.0 * theta[*kappa]).exp();
                let scale = tau_of(*tau) / (4.0 * std::f64::consts::PI);
                let spectrum: f64 = nus.iter().map(|nu| 2.0 * (k2 + nu).ln()).sum();
                let ld_space = m * scale.ln() + spectrum - m * k2.ln();
                let r = Transform::FisherRho.to_natural(theta[*rho]);
                let ld_time = -(n_t - 1.0) * (1.0 - r * r).ln();
                m * ld_time + n_t * ld_space
            }
        }
    }
}

/// Eigenvalues nu_i of C^{-1/2} G C^{-1/2} for the Matern spectrum.
fn matern_spectrum(pattern: &crate::components::MaternPattern) -> Vec<f64> {
    let m = pattern.mass.len();
    let mut n_mat = DMatrix::zeros(m, m);
    for (i, j, v) in pattern.g.iter_full() {
        n_mat[(i, j)] = v / (pattern.mass[i] * pattern.mass[j]).sqrt();
    }
    let eig = nalgebra::SymmetricEigen::new(n_mat);
    eig.eigenvalues.iter().cloned().collect()
}

/// Per-component reduced coordinates: x_block = basis * v_block for
/// constrained blocks, identity elsewhere.
struct ReducedBlock {
    x_range: std::ops::Range<usize>,
    v_range: std::ops::Range<usize>,
    /// Orthonormal null-space basis (constrained components only).
    basis: Option<DMatrix<f64>>,
}

struct State<'a> {
    bound: &'a BoundModel,
    obs_factory: &'a dyn Fn(&[f64]) -> Result<Box<dyn ObsModel>>,
    q: SparseSym,
    q_rows: Vec<Vec<(usize, f64)>>,
    obs: Box<dyn ObsModel>,
    v: Vec<f64>,
    x: Vec<f64>,
    eta: Vec<f64>,
    loglik_rows: Vec<f64>,
    loglik: f64,
    prior_quad: f64,
    log_det: f64,
    log_hyper_prior: f64,
    theta: Vec<f64>,
    col_rows: Vec<Vec<usize>>,
    logdets: Vec<LogDetEval>,
}

impl<'a> State<'a> {
    fn log_target(&self) -> f64 {
        self.loglik + 0.5 * self.log_det - 0.5 * self.prior_quad + self.log_hyper_prior
    }

    fn refresh_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        self.q = self.bound.precision(&theta);
        self.q_rows = self.q.to_rows();
        self.obs = (self.obs_factory)(&theta)?;
        self.prior_quad = self.q.quad_form(&self.x);
        self.log_det = self
            .logdets
            .iter()
            .map(|ld| ld.eval(&theta, &self.bound.hyper))
            .sum();
        self.log_hyper_prior = self.bound.hyper.log_prior(&theta);
        for i in 0..self.obs.n_obs() {
            self.loglik_rows[i] = self.obs.loglik(i, self.eta[i]);
        }
        self.loglik = self.loglik_rows.iter().sum();
        self.theta = theta;
        Ok(())
    }
}

fn constraints_in(block: &Block, constraints: &[Constraint]) -> Vec<Constraint> {
    constraints
        .iter()
        .filter(|c| c.idx.iter().all(|&i| block.range.contains(&i)))
        .map(|c| Constraint {
            idx: c.idx.iter().map(|&i| i - block.range.start).collect(),
            val: c.val.clone(),
        })
        .collect()
}

/// Orthonormal basis of the null space of the local constraint rows, from
/// the eigenvectors of the projector I - C^T (C C^T)^-1 C.
fn null_basis(m: usize, local: &[Constraint]) -> Result<DMatrix<f64>> {
    let k = local.len();
    let mut c = DMatrix::zeros(k, m);
    for (r, con) in local.iter().enumerate() {
        for (&i, &v) in con.idx.iter().zip(&con.val) {
            c[(r, i)] = v;
        }
    }
    let cct = &c * c.transpose();
    let chol = nalgebra::Cholesky::new(cct)
        .ok_or_else(|| Error::InvalidModel("dependent constraint rows".into()))?;
    let sol = chol.solve(&c);
    let proj = DMatrix::identity(m, m) - c.transpose() * sol;
    let eig = nalgebra::SymmetricEigen::new(proj);
    let mut cols: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    cols.sort_unstable();
    if cols.len() != m - k {
        return Err(Error::InvalidModel(
            "constraint null space has unexpected dimension".into(),
        ));
    }
    let mut basis = DMatrix::zeros(m, m - k);
    for (jn, &jc) in cols.iter().enumerate() {
        for i in 0..m {
            basis[(i, jn)] = eig.eigenvectors[(i, jc)];
        }
    }
    Ok(basis)
}

/// Random-walk Metropolis targeting the exact joint posterior. Reports
/// moments for all latent nodes, full chains for hyperparameters and
/// tracked nodes, effective sample sizes and Monte Carlo standard errors.
pub fn mh_sampler(bound: &BoundModel, opts: &MhOptions) -> Result<MhResult> {
    let factory = |theta: &[f64]| -> Result<Box<dyn ObsModel>> {
        Ok(Box::new(bound.obs_model(theta)?))
    };
    mh_sampler_with_obs(bound, opts, &factory)
}

/// Same sampler with a caller-supplied observation model (tests and
/// conjugate references).
pub fn mh_sampler_with_obs(
    bound: &BoundModel,
    opts: &MhOptions,
    obs_factory: &dyn Fn(&[f64]) -> Result<Box<dyn ObsModel>>,
) -> Result<MhResult> {
    let n = bound.n_latent;
    let p = bound.hyper.dim();

    // Reduced blocks and log-det evaluators per component.
    let mut reduced = Vec::new();
    let mut logdets = Vec::new();
    let mut v_dim = 0usize;
    for block in bound.blocks() {
        let m = block.range.len();
        let local = constraints_in(block, &bound.constraints);
        let basis = if local.is_empty() {
            None
        } else {
            Some(null_basis(m, &local)?)
        };
        let vd = m - local.len();
        reduced.push(ReducedBlock {
            x_range: block.range.clone(),
            v_range: v_dim..v_dim + vd,
            basis,
        });
        v_dim += vd;
        logdets.push(match &block.fill {
            BlockFill::FixedDiagonal { .. } => LogDetEval::Constant,
            BlockFill::Scaled { tau, .. } => LogDetEval::ScaledTau {
                df: vd as f64,
                tau: *tau,
            },
            BlockFill::ScaledPair { tau_u, n: nv, tau_v, .. } => LogDetEval::ScaledPairTau {
                df_u: (m - local.len() - nv) as f64,
                tau_u: *tau_u,
                n_v: *nv as f64,
                tau_v: *tau_v,
            },
            BlockFill::Ar1 { n, tau, rho } => LogDetEval::Ar1 {
                n: *n as f64,
                tau: *tau,
                rho: *rho,
            },
            BlockFill::Matern {
                pattern,
                tau_marginal,
                kappa,
            } => LogDetEval::Matern {
                nus: matern_spectrum(pattern),
                m: pattern.mass.len() as f64,
                tau: *tau_marginal,
                kappa: *kappa,
            },
            BlockFill::SpaceTime {
                pattern,
                n_periods,
                tau_marginal,
                kappa,
                rho,
                ..
            } => LogDetEval::SpaceTime {
                nus: matern_spectrum(pattern),
                m: pattern.mass.len() as f64,
                n_t: *n_periods as f64,
                tau: *tau_marginal,
                kappa: *kappa,
                rho: *rho,
            },
        });
    }

    // Proposal blocks: chunks of v-coordinates within each component.
    let mut prop_blocks: Vec<std::ops::Range<usize>> = Vec::new();
    for rb in &reduced {
        let mut start = rb.v_range.start;
        while start < rb.v_range.end {
            let end = (start + opts.block_size).min(rb.v_range.end);
            prop_blocks.push(start..end);
            start = end;
        }
    }
    let n_latent_blocks = prop_blocks.len();
    let n_blocks = n_latent_blocks + usize::from(p > 0);

    // Map from v coordinate to its reduced block.
    let mut v_owner = vec![0usize; v_dim];
    for (bi, rb) in reduced.iter().enumerate() {
        for vi in rb.v_range.clone() {
            v_owner[vi] = bi;
        }
    }

    let theta0 = bound.hyper.init();
    let q0 = bound.precision(&theta0);
    let mut state = State {
        bound,
        obs_factory,
        q_rows: q0.to_rows(),
        q: q0,
        obs: obs_factory(&theta0)?,
        v: vec![0.0; v_dim],
        x: vec![0.0; n],
        eta: vec![0.0; bound.projector.nrows()],
        loglik_rows: vec![0.0; bound.projector.nrows()],
        loglik: 0.0,
        prior_quad: 0.0,
        log_det: 0.0,
        log_hyper_prior: 0.0,
        theta: theta0.clone(),
        col_rows: bound.projector.rows_touching(),
        logdets,
    };
    state.eta = bound.projector.mul_vec(&state.x);
    state.refresh_theta(theta0)?;

    let mut scales = vec![0.4f64; n_blocks];
    let mut accept_counts = vec![0usize; n_blocks];
    let mut prop_counts = vec![0usize; n_blocks];
    let mut post_accept = vec![0usize; n_blocks];
    let mut post_prop = vec![0usize; n_blocks];

    // Tracked chains: hyperparameters plus fixed-effect nodes and extras.
    let mut tracked: Vec<(String, TrackSource)> = Vec::new();
    for (j, name) in bound.hyper.names().into_iter().enumerate() {
        tracked.push((name, TrackSource::Theta(j)));
    }
    for name in bound.fixed_effect_names() {
        let range = bound.block_range(&name)?;
        tracked.push((name, TrackSource::Node(range.start)));
    }
    for &i in &opts.track_nodes {
        tracked.push((format!("node[{i}]"), TrackSource::Node(i)));
    }
    let mut chains: Vec<Vec<f64>> = vec![Vec::new(); tracked.len()];

    let mut mean = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let mut theta_sum = vec![0.0f64; p];
    let mut theta_sq = vec![0.0f64; p];
    let mut n_recorded = 0usize;

    let mut rng = stream_rng(opts.seed, Stream::Oracle(0));
    let mut adapt_round = vec![0u32; n_blocks];

    for iter in 0..opts.iters {
        let in_burn = iter < opts.burn_in;
        // Latent blocks in order.
        for (bi, pb) in prop_blocks.iter().enumerate() {
            prop_counts[bi] += 1;
            if !in_burn {
                post_prop[bi] += 1;
            }
            let noise = standard_normals(&mut rng, pb.len());
            let dv: Vec<f64> = noise.iter().map(|z| z * scales[bi]).collect();
            // delta x, dense over the affected x-range.
            let rb = &reduced[v_owner[pb.start]];
            let (dx_start, dx_vals): (usize, Vec<f64>) = match &rb.basis {
                None => {
                    let start = rb.x_range.start + (pb.start - rb.v_range.start);
                    (start, dv.clone())
                }
                Some(basis) => {
                    let m = rb.x_range.len();
                    let mut acc = vec![0.0; m];
                    for (o, vi) in pb.clone().enumerate() {
                        let col = vi - rb.v_range.start;
                        for i in 0..m {
                            acc[i] += basis[(i, col)] * dv[o];
                        }
                    }
                    (rb.x_range.start, acc)
                }
            };
            let dx_end = dx_start + dx_vals.len();
            let dx_at = |c: usize| -> f64 {
                if c >= dx_start && c < dx_end {
                    dx_vals[c - dx_start]
                } else {
                    0.0
                }
            };

            // Delta of the prior quadratic: 2 dx^T Q x + dx^T Q dx via
            // the touched rows only.
            let mut dquad = 0.0;
            for (o, &di) in dx_vals.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                let i = dx_start + o;
                let mut qx_i = 0.0;
                let mut qdx_i = 0.0;
                for &(j, v) in &state.q_rows[i] {
                    qx_i += v * state.x[j];
                    qdx_i += v * dx_at(j);
                }
                dquad += 2.0 * di * qx_i + di * qdx_i;
            }

            // Delta of the likelihood via affected observation rows.
            let mut touched: Vec<usize> = Vec::new();
            for (o, &di) in dx_vals.iter().enumerate() {
                if di != 0.0 {
                    touched.extend_from_slice(&state.col_rows[dx_start + o]);
                }
            }
            touched.sort_unstable();
            touched.dedup();
            let mut dll = 0.0;
            let mut new_eta: Vec<(usize, f64)> = Vec::with_capacity(touched.len());
            for &r in &touched {
                let mut e = state.eta[r];
                for (c, w) in state.bound.projector.row(r) {
                    e += w * dx_at(c);
                }
                let l_new = state.obs.loglik(r, e);
                dll += l_new - state.loglik_rows[r];
                new_eta.push((r, e));
            }

            let log_ratio = dll - 0.5 * dquad;
            let u: f64 = rng.random();
            if u.ln() < log_ratio {
                accept_counts[bi] += 1;
                if !in_burn {
                    post_accept[bi] += 1;
                }
                for (o, vi) in pb.clone().enumerate() {
                    state.v[vi] += dv[o];
                }
                for (o, &di) in dx_vals.iter().enumerate() {
                    state.x[dx_start + o] += di;
                }
                for &(r, e) in &new_eta {
                    state.eta[r] = e;
                    let l = state.obs.loglik(r, e);
                    state.loglik += l - state.loglik_rows[r];
                    state.loglik_rows[r] = l;
                }
                state.prior_quad += dquad;
            }

            if in_burn && prop_counts[bi] % 50 == 0 {
                adapt_round[bi] += 1;
                let rate = accept_counts[bi] as f64 / prop_counts[bi] as f64;
                let step = (adapt_round[bi] as f64).powf(-0.6).min(0.25);
                scales[bi] *= ((rate - 0.25) * step).exp();
            }
        }

        // Joint hyperparameter block.
        if p > 0 {
            let bi = n_latent_blocks;
            prop_counts[bi] += 1;
            if !in_burn {
                post_prop[bi] += 1;
            }
            let noise = standard_normals(&mut rng, p);
            let proposal: Vec<f64> = state
                .theta
                .iter()
                .zip(&noise)
                .map(|(t, z)| t + z * scales[bi])
                .collect();
            let old_target = state.log_target();
            let old = (
                state.theta.clone(),
                state.prior_quad,
                state.log_det,
                state.log_hyper_prior,
                state.loglik,
                state.loglik_rows.clone(),
            );
            let ok = state.refresh_theta(proposal).is_ok();
            let accept = ok && {
                let u: f64 = rng.random();
                u.ln() < state.log_target() - old_target
            };
            if accept {
                accept_counts[bi] += 1;
                if !in_burn {
                    post_accept[bi] += 1;
                }
            } else {
                // Roll back without re-deriving anything.
                state.theta = old.0;
                state.q = bound.precision(&state.theta);
                state.q_rows = state.q.to_rows();
                state.obs = obs_factory(&state.theta)?;
                state.prior_quad = old.1;
                state.log_det = old.2;
                state.log_hyper_prior = old.3;
                state.loglik = old.4;
                state.loglik_rows = old.5;
            }
            if in_burn && prop_counts[bi] % 50 == 0 {
                adapt_round[bi] += 1;
                let rate = accept_counts[bi] as f64 / prop_counts[bi] as f64;
                let step = (adapt_round[bi] as f64).powf(-0.6).min(0.25);
                scales[bi] *= ((rate - 0.25) * step).exp();
            }
        }

        // Record post-burn-in states.
        if !in_burn && (iter - opts.burn_in) % opts.thin == 0 {
            n_recorded += 1;
            let k = n_recorded as f64;
            for i in 0..n {
                let d = state.x[i] - mean[i];
                mean[i] += d / k;
                m2[i] += d * (state.x[i] - mean[i]);
            }
            for j in 0..p {
                theta_sum[j] += state.theta[j];
                theta_sq[j] += state.theta[j] * state.theta[j];
            }
            for (ti, (_, src)) in tracked.iter().enumerate() {
                chains[ti].push(match src {
                    TrackSource::Theta(j) => state.theta[*j],
                    TrackSource::Node(i) => state.x[*i],
                });
            }
        }
    }

    let x_sd: Vec<f64> = m2
        .iter()
        .map(|&s| (s / (n_recorded as f64 - 1.0).max(1.0)).sqrt())
        .collect();
    let theta_mean: Vec<f64> = theta_sum.iter().map(|s| s / n_recorded as f64).collect();
    let theta_sd: Vec<f64> = theta_sq
        .iter()
        .zip(&theta_mean)
        .map(|(sq, m)| ((sq / n_recorded as f64 - m * m).max(0.0)).sqrt())
        .collect();

    let mut chains_map = BTreeMap::new();
    let mut ess_map = BTreeMap::new();
    let mut mcse_map = BTreeMap::new();
    for ((name, _), chain) in tracked.iter().zip(chains) {
        let e = ess(&chain);
        let var = variance(&chain);
        mcse_map.insert(name.clone(), (var / e.max(1.0)).sqrt());
        ess_map.insert(name.clone(), e);
        chains_map.insert(name.clone(), chain);
    }

    let accept_rates: Vec<f64> = post_accept
        .iter()
        .zip(&post_prop)
        .map(|(&a, &p)| a as f64 / p.max(1) as f64)
        .collect();

    Ok(MhResult {
        x_mean: mean,
        x_sd,
        theta_mean,
        theta_sd,
        theta_names: bound.hyper.names(),
        chains: chains_map,
        ess: ess_map,
        mcse: mcse_map,
        accept_rates,
        n_recorded,
    })
}

enum TrackSource {
    Theta(usize),
    Node(usize),
}

fn variance(chain: &[f64]) -> f64 {
    let n = chain.len() as f64;
    let mean = chain.iter().sum::<f64>() / n;
    chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Effective sample size by the initial-positive-sequence estimator on
/// pairs of autocovariances.
pub fn ess(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 8 {
        return n as f64;
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|v| v - mean).collect();
    let gamma = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - lag {
            acc += centered[i] * centered[i + lag];
        }
        acc / n as f64
    };
    let g0 = gamma(0);
    if g0 <= 0.0 {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut k = 1;
    let max_pairs = (n / 2).min(2000);
    while 2 * k + 1 < n && k <= max_pairs {
        let pair = gamma(2 * k - 1) + gamma(2 * k);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let tau = 1.0 + 2.0 * sum / g0;
    (n as f64 / tau).max(1.0)
}

/// Two-chain Gelman-Rubin statistic.
pub fn gelman_rubin(chains: &[&[f64]]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0)
        * means
            .iter()
            .map(|mu| (mu - grand) * (mu - grand))
            .sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}
