//! Model-comparison scores: WAIC, DIC and the leave-group-out
//! cross-validation log-score with correlation-based automatic groups.
//!
//! All scores run off one shared posterior sample set so they stay
//! comparable within a call, and every estimate is reproducible under the
//! seed.

use crate::components::BoundModel;
use crate::error::{Error, Result};
use crate::inference::{sample_posterior, LaplaceFit};
use crate::likelihood::ObsModel;
use crate::links::logsumexp;
use rayon::prelude::*;

/// Posterior draws with their per-observation linear predictors and
/// pointwise log-likelihoods (binomial coefficient included).
pub struct ScoreSamples {
    /// n_draws x n_obs.
    pub eta: Vec<Vec<f64>>,
    pub loglik: Vec<Vec<f64>>,
    /// Detection coefficients behind each draw.
    pub alpha: Vec<Vec<f64>>,
    pub n_obs: usize,
}

pub fn score_samples(
    bound: &BoundModel,
    fit: &LaplaceFit,
    n_samples: usize,
    seed: u64,
) -> Result<ScoreSamples> {
    let draws = sample_posterior(fit, n_samples, seed);
    let n_obs = bound.n_obs();
    // Observation models per explored point (detection depends on theta).
    let obs_by_point: Vec<_> = fit
        .points
        .iter()
        .map(|p| bound.obs_model(&p.theta))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..draws.n_draws())
        .into_par_iter()
        .map(|s| {
            let k = draws.point_idx[s];
            let obs = &obs_by_point[k];
            let eta = bound.projector.mul_vec(&draws.x[s]);
            let ll: Vec<f64> = (0..n_obs).map(|i| obs.loglik(i, eta[i])).collect();
            let alpha = bound.detection_coefs(&fit.points[k].theta);
            (eta, ll, alpha)
        })
        .collect();
    let mut eta = Vec::with_capacity(n_samples);
    let mut loglik = Vec::with_capacity(n_samples);
    let mut alpha = Vec::with_capacity(n_samples);
    for (e, l, a) in rows {
        eta.push(e);
        loglik.push(l);
        alpha.push(a);
    }
    Ok(ScoreSamples {
        eta,
        loglik,
        alpha,
        n_obs,
    })
}

#[derive(Debug, Clone)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Per observation (lppd_i, p_waic_i).
    pub pointwise: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct DicResult {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

/// WAIC from a sample matrix: lppd_i = log mean_s exp(l_si),
/// p_waic_i = var_s(l_si), WAIC = -2 sum(lppd_i - p_waic_i).
pub fn waic_from_pointwise(loglik: &[Vec<f64>]) -> WaicResult {
    let s = loglik.len();
    let n = loglik.first().map_or(0, |r| r.len());
    let mut pointwise = Vec::with_capacity(n);
    for i in 0..n {
        let col: Vec<f64> = loglik.iter().map(|row| row[i]).collect();
        let lppd_i = logsumexp(&col) - (s as f64).ln();
        let mean = col.iter().sum::<f64>() / s as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s as f64 - 1.0);
        pointwise.push((lppd_i, var));
    }
    let lppd: f64 = pointwise.iter().map(|p| p.0).sum();
    let p_waic: f64 = pointwise.iter().map(|p| p.1).sum();
    WaicResult {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        pointwise,
    }
}

/// DIC from the shared samples: mean deviance versus the deviance at the
/// posterior-mean linear predictor and posterior-mean detection
/// coefficients.
pub fn dic_from_samples(bound: &BoundModel, samples: &ScoreSamples) -> Result<DicResult> {
    let s = samples.loglik.len();
    let n = samples.n_obs;
    let mean_deviance = samples
        .loglik
        .iter()
        .map(|row| -2.0 * row.iter().sum::<f64>())
        .sum::<f64>()
        / s as f64;
    let eta_mean: Vec<f64> = (0..n)
        .map(|i| samples.eta.iter().map(|row| row[i]).sum::<f64>() / s as f64)
        .collect();
    let n_alpha = samples.alpha[0].len();
    let alpha_mean: Vec<f64> = (0..n_alpha)
        .map(|j| samples.alpha.iter().map(|a| a[j]).sum::<f64>() / s as f64)
        .collect();
    // Observation model at the posterior-mean detection coefficients.
    let obs = bound.obs_model_with_coefs(&alpha_mean)?;
    let deviance_at_mean = -2.0 * (0..n).map(|i| obs.loglik(i, eta_mean[i])).sum::<f64>();
    let p_d = mean_deviance - deviance_at_mean;
    Ok(DicResult {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
        deviance_at_mean,
    })
}

pub fn waic(
    bound: &BoundModel,
    fit: &LaplaceFit,
    n_samples: usize,
    seed: u64,
) -> Result<WaicResult> {
    Ok(waic_from_pointwise(
        &score_samples(bound, fit, n_samples, seed)?.loglik,
    ))
}

pub fn dic(bound: &BoundModel, fit: &LaplaceFit, n_samples: usize, seed: u64) -> Result<DicResult> {
    dic_from_samples(bound, &score_samples(bound, fit, n_samples, seed)?)
}

/// Leave-out index sets per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub groups: Vec<Vec<usize>>,
    pub num_level_sets: usize,
}

/// Correlation-based automatic groups: for each observation the posterior
/// correlations of its linear predictor with all others are rounded to
/// two decimals; the distinct rounded magnitudes form level sets, and the
/// group keeps everything in the top `num_level_sets` of them.
pub fn lgocv_groups(samples: &ScoreSamples, num_level_sets: usize) -> Result<GroupAssignment> {
    if num_level_sets < 1 {
        return Err(Error::DomainError("num_level_sets must be >= 1".into()));
    }
    let s = samples.eta.len();
    let n = samples.n_obs;
    let mut mean = vec![0.0; n];
    for row in &samples.eta {
        for (m, e) in mean.iter_mut().zip(row) {
            *m += e / s as f64;
        }
    }
    // Centered draws, column sds.
    let centered: Vec<Vec<f64>> = samples
        .eta
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(e, m)| e - m).collect())
        .collect();
    let sd: Vec<f64> = (0..n)
        .map(|i| (centered.iter().map(|r| r[i] * r[i]).sum::<f64>() / (s as f64 - 1.0)).sqrt())
        .collect();

    let groups: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            // Rounded |correlation| of eta_i with every eta_j.
            let mut rounded = vec![0u64; n];
            for j in 0..n {
                let r = if sd[i] > 0.0 && sd[j] > 0.0 {
                    let cov = centered.iter().map(|row| row[i] * row[j]).sum::<f64>()
                        / (s as f64 - 1.0);
                    (cov / (sd[i] * sd[j])).clamp(-1.0, 1.0)
                } else if i == j {
                    1.0
                } else {
                    0.0
                };
                rounded[j] = (r.abs() * 100.0).round() as u64;
            }
            let mut levels = rounded.clone();
            levels.sort_unstable_by(|a, b| b.cmp(a));
            levels.dedup();
            let cut = levels[num_level_sets.min(levels.len()) - 1];
            let mut group: Vec<usize> = (0..n).filter(|&j| rounded[j] >= cut).collect();
            if !group.contains(&i) {
                group.push(i);
                group.sort_unstable();
            }
            group
        })
        .collect();
    Ok(GroupAssignment {
        groups,
        num_level_sets,
    })
}

#[derive(Debug, Clone)]
pub struct LgocvResult {
    /// Mean of the pointwise scores (log scale unless disabled).
    pub score: f64,
    pub pointwise: Vec<f64>,
    pub ess: Vec<f64>,
    /// Observations whose importance weights degraded (ESS < 50).
    pub low_ess: Vec<usize>,
}

/// Leave-group-out predictive density of each observation by importance
/// reweighting of the shared posterior samples: weights proportional to
/// the inverse likelihood of the left-out group, self-normalized.
pub fn lgocv_logscore(
    samples: &ScoreSamples,
    groups: &GroupAssignment,
    log_scores: bool,
) -> Result<LgocvResult> {
    let s = samples.loglik.len();
    let n = samples.n_obs;
    if groups.groups.len() != n {
        return Err(Error::DimensionMismatch("one group per observation".into()));
    }
    let per_obs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let group = &groups.groups[i];
            let mut logw = vec![0.0f64; s];
            for (si, row) in samples.loglik.iter().enumerate() {
                let mut acc = 0.0;
                for &j in group {
                    acc -= row[j];
                }
                logw[si] = acc;
            }
            let lse_w = logsumexp(&logw);
            let num: Vec<f64> = (0..s).map(|si| logw[si] + samples.loglik[si][i]).collect();
            let log_pred = logsumexp(&num) - lse_w;
            let lse_2w = logsumexp(&logw.iter().map(|w| 2.0 * w).collect::<Vec<_>>());
            let ess = (2.0 * lse_w - lse_2w).exp();
            (log_pred, ess)
        })
        .collect();
    let pointwise: Vec<f64> = per_obs
        .iter()
        .map(|&(lp, _)| if log_scores { lp } else { lp.exp() })
        .collect();
    let ess: Vec<f64> = per_obs.iter().map(|&(_, e)| e).collect();
    let low_ess: Vec<usize> = ess
        .iter()
        .enumerate()
        .filter(|&(_, &e)| e < 50.0)
        .map(|(i, _)| i)
        .collect();
    if !low_ess.is_empty() {
        log::warn!(
            "LGOCV importance weights degraded for {} observation(s): ESS < 50",
            low_ess.len()
        );
    }
    Ok(LgocvResult {
        score: pointwise.iter().sum::<f64>() / n as f64,
        pointwise,
        ess,
        low_ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waic_zero_variance_has_no_penalty() {
        // Identical samples: p_waic = 0 and lppd is the common value.
        let row = vec![-1.2, -0.7, -2.0];
        let ll = vec![row.clone(), row.clone(), row.clone(), row];
        let r = waic_from_pointwise(&ll);
        assert!(r.p_waic.abs() < 1e-12);
        assert!((r.lppd - (-3.9)).abs() < 1e-12);
        assert!((r.waic - 7.8).abs() < 1e-10);
    }

    #[test]
    fn waic_penalty_matches_sample_variance() {
        let ll = vec![vec![-1.0], vec![-2.0], vec![-3.0]];
        let r = waic_from_pointwise(&ll);
        assert!((r.pointwise[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_certain_zero_row_scores_near_zero() {
        // y = 0, K = 1, p -> 0: pointwise density psi (1-p) + (1-psi) -> 1,
        // so the pointwise lppd is ~ 0.
        let ll = crate::likelihood::zib_logpmf(0, 1, 0.6, 1e-9, true).unwrap();
        assert!(ll.abs() < 1e-8);
    }

    #[test]
    fn level_sets_are_nested_as_num_level_sets_grows() {
        // Synthetic eta samples with a correlated pair and a noise column.
        let mut eta = Vec::new();
        let mut state = 9u64;
        let mut unit = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..400 {
            let a = unit();
            let b = 0.9 * a + 0.1 * unit();
            let c = unit();
            eta.push(vec![a, b, c]);
        }
        let samples = ScoreSamples {
            loglik: eta.clone(),
            eta,
            alpha: vec![],
            n_obs: 3,
        };
        let g1 = lgocv_groups(&samples, 1).unwrap();
        let g2 = lgocv_groups(&samples, 2).unwrap();
        let g3 = lgocv_groups(&samples, 3).unwrap();
        for i in 0..3 {
            for j in &g1.groups[i] {
                assert!(g2.groups[i].contains(j));
            }
            for j in &g2.groups[i] {
                assert!(g3.groups[i].contains(j));
            }
        }
        // Identical inputs give identical groups.
        let g1b = lgocv_groups(&samples, 1).unwrap();
        assert_eq!(g1, g1b);
    }

    #[test]
    fn lgocv_rejects_bad_level_sets() {
        let samples = ScoreSamples {
            eta: vec![vec![0.0]],
            loglik: vec![vec![0.0]],
            alpha: vec![],
            n_obs: 1,
        };
        assert!(lgocv_groups(&samples, 0).is_err());
    }
}
