//! Generative and predictive checks: simulation edge cases and moment
//! recovery, prediction surfaces, uncertainty bands, score behaviour.

use occulgm_core::components::BoundModel;
use occulgm_core::data::{ObservationTable, SiteGeometry, SiteInfo};
use occulgm_core::eval::*;
use occulgm_core::inference::{optimize_and_explore, ExploreOptions};
use occulgm_core::likelihood::Orientation;
use occulgm_core::links::Link;
use occulgm_core::model::*;
use occulgm_core::predict::*;
use std::collections::BTreeMap;

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

fn layout(n_sites: usize, n_periods: usize, k: u32) -> SimLayout {
    SimLayout {
        placement: SitePlacement::Uniform {
            n_sites,
            x0: 0.0,
            y0: 0.0,
            x1: 10.0,
            y1: 10.0,
        },
        n_periods,
        first_period: 0,
        visits: VisitsSpec::Fixed(k),
        site_covariates: vec![],
        row_covariates: vec![],
        coord_covariates: vec![],
        derived: vec![],
    }
}

fn truth_fixed(intercept: f64) -> SimTruthParams {
    SimTruthParams {
        hyper: BTreeMap::new(),
        fixed_effects: BTreeMap::from([("intercept".to_string(), intercept)]),
    }
}

#[test]
fn degenerate_probabilities_pin_counts() {
    // psi ~ 1, p ~ 1 -> y = K everywhere.
    let spec = intercept_spec(Some(vec![30.0]));
    let (table, _, _) =
        simulate_dataset(&spec, &layout(40, 2, 3), &truth_fixed(30.0), None, 5).unwrap();
    assert!(table.y.iter().all(|&y| y == 3));
    // psi ~ 0 -> all zeros.
    let (table, _, _) =
        simulate_dataset(&spec, &layout(40, 2, 3), &truth_fixed(-30.0), None, 5).unwrap();
    assert!(table.y.iter().all(|&y| y == 0));
}

#[test]
fn simulation_is_bit_reproducible() {
    let spec = intercept_spec(Some(vec![0.3]));
    let (t1, _, s1) = simulate_dataset(&spec, &layout(50, 3, 3), &truth_fixed(0.4), None, 77).unwrap();
    let (t2, _, s2) = simulate_dataset(&spec, &layout(50, 3, 3), &truth_fixed(0.4), None, 77).unwrap();
    assert_eq!(t1.y, t2.y);
    assert_eq!(t1.k, t2.k);
    for (a, b) in s1.psi.iter().zip(&s2.psi) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // Different seed changes the data.
    let (t3, _, _) = simulate_dataset(&spec, &layout(50, 3, 3), &truth_fixed(0.4), None, 78).unwrap();
    assert_ne!(t1.y, t3.y);
}

#[test]
fn detection_frequency_matches_psi_p_within_3_sigma() {
    // One stratum: constant psi, p, K. The total count sum y has mean
    // n K psi p and an exact variance from the mixture.
    let (eta0, alpha0, k) = (0.35f64, 0.2f64, 3u32);
    let spec = intercept_spec(Some(vec![alpha0]));
    let n_rows = 10_000usize;
    let (table, _, _) = simulate_dataset(
        &spec,
        &layout(n_rows, 1, k),
        &truth_fixed(eta0),
        None,
        123,
    )
    .unwrap();
    let psi = Link::Logit.inv(eta0);
    let p = Link::Logit.inv(alpha0);
    let kf = k as f64;
    let mean_row = psi * kf * p;
    let var_row = psi * (kf * p * (1.0 - p) + (kf * p) * (kf * p)) - mean_row * mean_row;
    let total: f64 = table.y.iter().map(|&y| y as f64).sum();
    let expected = n_rows as f64 * mean_row;
    let sd = (n_rows as f64 * var_row).sqrt();
    assert!(
        (total - expected).abs() < 3.0 * sd,
        "total {total} vs expected {expected} (sd {sd})"
    );
}

#[test]
fn visits_vary_when_requested() {
    let spec = intercept_spec(Some(vec![0.0]));
    let mut lay = layout(200, 1, 3);
    lay.visits = VisitsSpec::Range { min: 1, max: 3 };
    let (table, _, _) = simulate_dataset(&spec, &lay, &truth_fixed(0.0), None, 11).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for &k in &table.k {
        assert!((1..=3).contains(&k));
        seen.insert(k);
    }
    assert_eq!(seen.len(), 3, "all visit counts should occur");
    assert!(table.y.iter().zip(&table.k).all(|(y, k)| y <= k));
}

#[test]
fn intercept_only_prediction_is_flat_and_reproducible() {
    let spec = intercept_spec(Some(vec![0.4]));
    let (table, geom, _) =
        simulate_dataset(&spec, &layout(60, 1, 3), &truth_fixed(0.5), None, 21).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();
    let rows = predict_rows(&bound, &fit, &table, Some(&geom), None, 600, 33).unwrap();
    // Flat surface: every row identical, probabilities in (0,1), quantiles
    // ordered with the mean inside the interval.
    for r in &rows {
        assert!(r.in_domain);
        assert_eq!(r.mean.to_bits(), rows[0].mean.to_bits());
        assert!(r.mean > 0.0 && r.mean < 1.0);
        assert!(r.q025 <= r.q500 && r.q500 <= r.q975);
        assert!(r.mean > r.q025 && r.mean < r.q975);
        assert!(r.band >= 0.0 && r.band <= 1.0);
        assert!((r.band - (r.q975 - r.q025)).abs() < 1e-15);
    }
    // Same seed, same rows: byte-identical summaries.
    let rows2 = predict_rows(&bound, &fit, &table, Some(&geom), None, 600, 33).unwrap();
    for (a, b) in rows.iter().zip(&rows2) {
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.q975.to_bits(), b.q975.to_bits());
    }
}

#[test]
fn uncertainty_band_grows_away_from_observed_sites() {
    // Sites only on the left half of the domain; the posterior band of a
    // Matern field widens toward the unobserved right edge.
    let lat = LatticeSpec {
        nx: 8,
        ny: 6,
        x0: 0.0,
        y0: 0.0,
        spacing: 1.0,
    };
    let mut spec = ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![
            ComponentDef::new("intercept", ComponentKind::Intercept),
            ComponentDef::new("space", ComponentKind::Matern { lattice: lat }),
        ],
        detection: HyperProbModel {
            fixed: Some(vec![1.0]),
            ..Default::default()
        },
    };
    spec.components[1].priors.kappa_init = Some(0.8);
    let lay = SimLayout {
        placement: SitePlacement::Uniform {
            n_sites: 150,
            x0: 0.2,
            y0: 0.2,
            x1: 3.0,
            y1: 4.8,
        },
        n_periods: 1,
        first_period: 0,
        visits: VisitsSpec::Fixed(3),
        site_covariates: vec![],
        row_covariates: vec![],
        coord_covariates: vec![],
        derived: vec![],
    };
    let truth = SimTruthParams {
        hyper: BTreeMap::from([
            ("space.log_prec".to_string(), 1.0),
            ("space.log_kappa".to_string(), 0.8),
        ]),
        fixed_effects: BTreeMap::from([("intercept".to_string(), 0.3)]),
    };
    let (table, geom, _) = simulate_dataset(&spec, &lay, &truth, None, 41).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();

    // Prediction grid: all lattice nodes.
    let mut ids = Vec::new();
    let mut pgeom = SiteGeometry::default();
    for iy in 0..lat.ny {
        for ix in 0..lat.nx {
            let id = format!("c{ix}_{iy}");
            pgeom
                .sites
                .insert(id.clone(), SiteInfo::at(ix as f64, iy as f64));
            ids.push(id);
        }
    }
    let n = ids.len();
    let ptable = ObservationTable::new(
        ids,
        vec![0; n],
        vec![0; n],
        vec![1; n],
        Default::default(),
    )
    .unwrap();
    let rows = predict_rows(&bound, &fit, &ptable, Some(&pgeom), None, 800, 3).unwrap();
    let band_at = |x_lo: f64, x_hi: f64| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| {
                let x = r.x.unwrap();
                x >= x_lo && x <= x_hi
            })
            .map(|r| r.band)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let near = band_at(0.0, 3.0);
    let far = band_at(6.0, 8.0);
    assert!(
        far > near,
        "band near data {near} should be below band far away {far}"
    );
}

#[test]
fn out_of_domain_cells_are_flagged_not_extrapolated() {
    let lat = LatticeSpec {
        nx: 5,
        ny: 5,
        x0: 0.0,
        y0: 0.0,
        spacing: 1.0,
    };
    let spec = ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![
            ComponentDef::new("intercept", ComponentKind::Intercept),
            ComponentDef::new("space", ComponentKind::Matern { lattice: lat }),
        ],
        detection: HyperProbModel {
            fixed: Some(vec![0.5]),
            ..Default::default()
        },
    };
    let lay = SimLayout {
        placement: SitePlacement::Uniform {
            n_sites: 60,
            x0: 0.1,
            y0: 0.1,
            x1: 3.9,
            y1: 3.9,
        },
        n_periods: 1,
        first_period: 0,
        visits: VisitsSpec::Fixed(2),
        site_covariates: vec![],
        row_covariates: vec![],
        coord_covariates: vec![],
        derived: vec![],
    };
    let truth = SimTruthParams {
        hyper: BTreeMap::from([
            ("space.log_prec".to_string(), 1.0),
            ("space.log_kappa".to_string(), 1.0),
        ]),
        fixed_effects: BTreeMap::from([("intercept".to_string(), 0.0)]),
    };
    let (table, geom, _) = simulate_dataset(&spec, &lay, &truth, None, 51).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();

    let mut pgeom = SiteGeometry::default();
    pgeom
        .sites
        .insert("inside".to_string(), SiteInfo::at(2.0, 2.0));
    pgeom
        .sites
        .insert("outside".to_string(), SiteInfo::at(9.0, 2.0));
    let ptable = ObservationTable::new(
        vec!["inside".into(), "outside".into()],
        vec![0, 0],
        vec![0, 0],
        vec![1, 1],
        Default::default(),
    )
    .unwrap();
    let rows = predict_rows(&bound, &fit, &ptable, Some(&pgeom), None, 100, 1).unwrap();
    assert!(rows[0].in_domain);
    assert!(!rows[1].in_domain);
    assert!(rows[1].mean.is_nan());
}

#[test]
fn dic_effective_parameters_near_model_dimension() {
    // Fixed-effects-only model (intercept + 2 linear terms), known
    // detection, plenty of data: p_d within 20% of 3.
    let spec = ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![
            ComponentDef::new("intercept", ComponentKind::Intercept),
            ComponentDef::new(
                "b1",
                ComponentKind::Linear {
                    covariate: "x1".into(),
                },
            ),
            ComponentDef::new(
                "b2",
                ComponentKind::Linear {
                    covariate: "x2".into(),
                },
            ),
        ],
        detection: HyperProbModel {
            fixed: Some(vec![1.2]),
            ..Default::default()
        },
    };
    let mut lay = layout(500, 1, 4);
    lay.site_covariates = vec!["x1".into(), "x2".into()];
    let truth = SimTruthParams {
        hyper: BTreeMap::new(),
        fixed_effects: BTreeMap::from([
            ("intercept".to_string(), 0.3),
            ("b1".to_string(), 0.9),
            ("b2".to_string(), -0.7),
        ]),
    };
    let (table, geom, _) = simulate_dataset(&spec, &lay, &truth, None, 61).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();
    let samples = score_samples(&bound, &fit, 4000, 5).unwrap();
    let dic = dic_from_samples(&bound, &samples).unwrap();
    assert!(
        (dic.p_d - 3.0).abs() < 0.6,
        "p_d {} should be close to 3",
        dic.p_d
    );
    // WAIC on the same samples: penalty close to p_d for a regular model.
    let waic = waic_from_pointwise(&samples.loglik);
    assert!((waic.p_waic - 3.0).abs() < 1.0, "p_waic {}", waic.p_waic);
}

#[test]
fn singleton_groups_on_exchangeable_model() {
    // IID-site model: level set 1 keeps only the self-correlation.
    let spec = ModelSpec {
        orientation: Orientation::Occupancy,
        link: Link::Logit,
        components: vec![ComponentDef::new(
            "site",
            ComponentKind::Iid {
                group: GroupBy::Site,
            },
        )],
        detection: HyperProbModel {
            fixed: Some(vec![0.4]),
            ..Default::default()
        },
    };
    let lay = layout(25, 1, 3);
    let truth = SimTruthParams {
        hyper: BTreeMap::from([("site.log_prec".to_string(), 1.0)]),
        fixed_effects: BTreeMap::new(),
    };
    let (table, geom, _) = simulate_dataset(&spec, &lay, &truth, None, 71).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();
    let samples = score_samples(&bound, &fit, 1500, 13).unwrap();
    let groups = lgocv_groups(&samples, 1).unwrap();
    for (i, g) in groups.groups.iter().enumerate() {
        assert_eq!(g, &vec![i], "group of {i} should be the singleton");
    }
}

#[test]
fn perfect_prediction_scores_near_zero() {
    // psi -> 1, p -> 1, all y = K: the predictive density of every point
    // approaches 1 and the log-score approaches 0. All-detections data
    // leave the upper tail of eta unidentified, so the posterior needs a
    // proper prior scale for the limit to concentrate.
    let mut spec = intercept_spec(Some(vec![12.0]));
    spec.components[0].fixed_prior_precision = Some(2.0);
    let (table, geom, _) =
        simulate_dataset(&spec, &layout(800, 1, 3), &truth_fixed(12.0), None, 81).unwrap();
    assert!(table.y.iter().all(|&y| y == 3));
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();
    let samples = score_samples(&bound, &fit, 2000, 17).unwrap();
    let groups = lgocv_groups(&samples, 1).unwrap();
    let r = lgocv_logscore(&samples, &groups, true).unwrap();
    assert!(
        r.score > -0.05 && r.score <= 1e-9,
        "log-score {} should be near 0",
        r.score
    );
    // The density-scale variant approaches 1 from below.
    let rd = lgocv_logscore(&samples, &groups, false).unwrap();
    assert!(rd.score > 0.95 && rd.score <= 1.0);
}

#[test]
fn scores_stable_when_samples_double() {
    let spec = intercept_spec(Some(vec![0.2]));
    let (table, geom, _) =
        simulate_dataset(&spec, &layout(80, 1, 3), &truth_fixed(0.3), None, 91).unwrap();
    let bound = BoundModel::bind(&spec, &table, Some(&geom), None).unwrap();
    let fit = optimize_and_explore(&bound, &ExploreOptions::default()).unwrap();
    let s1 = score_samples(&bound, &fit, 1000, 19).unwrap();
    let s2 = score_samples(&bound, &fit, 2000, 19).unwrap();
    let w1 = waic_from_pointwise(&s1.loglik);
    let w2 = waic_from_pointwise(&s2.loglik);
    // Monte Carlo error of WAIC: bounded by a few units of the pointwise
    // spread; doubling samples moves it by less than 2 SE-of-noise.
    let se: f64 = {
        let n = s1.n_obs as f64;
        let spread: f64 = w1.pointwise.iter().map(|p| p.1).sum::<f64>() / n;
        2.0 * (spread * n).sqrt() / (1000f64).sqrt() * 2.0
    };
    assert!(
        (w1.waic - w2.waic).abs() < se.max(1.0),
        "waic {} vs {}",
        w1.waic,
        w2.waic
    );
    // Seed reproducibility.
    let s3 = score_samples(&bound, &fit, 1000, 19).unwrap();
    let w3 = waic_from_pointwise(&s3.loglik);
    assert_eq!(w1.waic.to_bits(), w3.waic.to_bits());
}
