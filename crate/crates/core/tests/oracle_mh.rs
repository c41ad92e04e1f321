//! Checks of the Metropolis reference sampler: exact conjugate targets,
//! two-chain convergence diagnostics, agreement with the grid integrator,
//! and adaptation behaviour.

use occulgm_core::components::BoundModel;
use occulgm_core::data::ObservationTable;
use occulgm_core::likelihood::{GaussianObs, ObsModel, Orientation};
use occulgm_core::links::Link;
use occulgm_core::model::*;
use occulgm_core::oracle::*;
use occulgm_core::rng::{stream_rng, Stream};
use occulgm_core::Result;
use rand::Rng;

fn intercept_spec(fixed_alpha: Option<Vec<f64>>) -> ModelSpec {
    ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![ComponentDef::new("intercept", ComponentKind::Intercept)],
        detection: HyperProbModel {
            fixed: fixed_alpha,
            ..Default::default()
        },
    }
}

fn sim_rows(n: usize, eta0: f64, p: f64, k: u32, seed: u64) -> ObservationTable {
    let mut rng = stream_rng(seed, Stream::Observation);
    let psi = Link::Logit.inv(eta0);
    let y = (0..n)
        .map(|_| {
            let occ = rng.random::<f64>() < psi;
            (0..k)
                .filter(|_| occ && rng.random::<f64>() < p)
                .count() as u32
        })
        .collect();
    ObservationTable::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        vec![0; n],
        y,
        vec![k; n],
        Default::default(),
    )
    .unwrap()
}

#[test]
fn gaussian_toy_matches_closed_form_within_mc_error() {
    let table = sim_rows(8, 0.0, 0.5, 1, 1);
    let spec = intercept_spec(Some(vec![0.0]));
    let bound = BoundModel::bind(&spec, &table, None, None).unwrap();
    let y = vec![0.9, 1.4, 0.1, -0.2, 0.7, 1.8, 0.4, 1.0];
    let prec = 2.5;
    let tau0 = 0.001;
    let post_prec = tau0 + y.len() as f64 * prec;
    let post_mean = prec * y.iter().sum::<f64>() / post_prec;
    let post_sd = post_prec.powf(-0.5);

    let y_clone = y.clone();
    let factory = move |_theta: &[f64]| -> Result<Box<dyn ObsModel>> {
        Ok(Box::new(GaussianObs {
            y: y_clone.clone(),
            precision: prec,
        }))
    };
    let opts = MhOptions {
        iters: 30_000,
        burn_in: 5_000,
        thin: 2,
        seed: 42,
        ..Default::default()
    };
    let r = mh_sampler_with_obs(&bound, &opts, &factory).unwrap();
    let mcse = r.mcse["intercept"];
    assert!(
        (r.x_mean[0] - post_mean).abs() < 3.0 * mcse,
        "mean {} vs exact {post_mean} (mcse {mcse})",
        r.x_mean[0]
    );
    assert!((r.x_sd[0] / post_sd - 1.0).abs() < 0.05);
    for rate in &r.accept_rates {
        assert!(*rate > 0.1 && *rate < 0.6, "acceptance rate {rate}");
    }
}

#[test]
fn two_seeds_pass_gelman_rubin() {
    let table = sim_rows(60, 0.3, 0.6, 3, 7);
    let spec = intercept_spec(None); // alpha0 inferred
    let bound = BoundModel::bind(&spec, &table, None, None).unwrap();
    let run = |seed: u64| {
        mh_sampler(
            &bound,
            &MhOptions {
                iters: 40_000,
                burn_in: 10_000,
                thin: 4,
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let a = run(1);
    let b = run(2);
    for name in ["intercept", "alpha0"] {
        let rhat = gelman_rubin(&[a.chain(name).unwrap(), b.chain(name).unwrap()]);
        assert!(rhat < 1.05, "{name}: R-hat {rhat}");
    }
}

#[test]
fn grid_and_mh_oracles_agree() {
    // Two-dimensional posterior (latent intercept + detection intercept):
    // the dense grid and the chain agree within 3 Monte Carlo SEs.
    let table = sim_rows(80, 0.4, 0.6, 3, 17);
    let spec = intercept_spec(None);
    let bound = BoundModel::bind(&spec, &table, None, None).unwrap();
    let grid = grid_posterior(&bound, &[(-3.0, 3.0), (-3.0, 3.0)], 241).unwrap();
    let mh = mh_sampler(
        &bound,
        &MhOptions {
            iters: 60_000,
            burn_in: 15_000,
            thin: 4,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let mcse_b0 = mh.mcse["intercept"].max(1e-4);
    let mcse_a0 = mh.mcse["alpha0"].max(1e-4);
    assert!(
        (mh.x_mean[0] - grid.means[0]).abs() < 3.0 * mcse_b0,
        "intercept {} vs grid {}",
        mh.x_mean[0],
        grid.means[0]
    );
    assert!(
        (mh.theta_mean[0] - grid.means[1]).abs() < 3.0 * mcse_a0,
        "alpha0 {} vs grid {}",
        mh.theta_mean[0],
        grid.means[1]
    );
    // Spreads agree loosely too (grid is exact; MC error on sds).
    assert!((mh.x_sd[0] / grid.sds[0] - 1.0).abs() < 0.1);
    assert!((mh.theta_sd[0] / grid.sds[1] - 1.0).abs() < 0.1);
}

#[test]
fn constrained_chain_respects_constraints() {
    // RW2 smooth: the chain never leaves the constraint manifold.
    let mut table = sim_rows(90, 0.2, 0.6, 3, 27);
    table.covariates.insert(
        "elev".to_string(),
        (0..90).map(|i| (i % 9) as f64).collect(),
    );
    let table = ObservationTable::new(
        table.site_ids.clone(),
        table.periods.clone(),
        table.y.clone(),
        table.k.clone(),
        table.covariates.clone(),
    )
    .unwrap();
    let spec = ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![
            ComponentDef::new("intercept", ComponentKind::Intercept),
            ComponentDef::new(
                "smooth",
                ComponentKind::RandomWalk {
                    covariate: "elev".into(),
                    order: 2,
                    bins: 6,
                    scaled: true,
                },
            ),
        ],
        detection: HyperProbModel {
            fixed: Some(vec![0.4]),
            ..Default::default()
        },
    };
    let bound = BoundModel::bind(&spec, &table, None, None).unwrap();
    let r = mh_sampler(
        &bound,
        &MhOptions {
            iters: 8_000,
            burn_in: 2_000,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    // Means of a linearly constrained chain satisfy the constraints.
    for c in &bound.constraints {
        assert!(c.dot(&r.x_mean).abs() < 1e-10, "constraint violated");
    }
}

#[test]
fn ess_detects_autocorrelation() {
    // AR(1)-ish synthetic chain: ESS well below n; white chain: ESS ~ n.
    let mut rng = stream_rng(4, Stream::Oracle(9));
    let n = 20_000;
    let mut ar = vec![0.0f64; n];
    for i in 1..n {
        let z: f64 = rng.random::<f64>() - 0.5;
        ar[i] = 0.9 * ar[i - 1] + z;
    }
    let e_ar = ess(&ar);
    assert!(e_ar < n as f64 / 5.0, "AR chain ESS {e_ar}");
    let white: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let e_w = ess(&white);
    assert!(e_w > n as f64 / 3.0, "white chain ESS {e_w}");
}
