//! Simulation of occupancy data sets from known parameters, posterior
//! prediction surfaces with uncertainty bands, and significance labels
//! for space-varying trend coefficients.

use crate::components::BoundModel;
use crate::data::{ObservationTable, SiteGeometry, SiteInfo};
use crate::error::{Error, Result};
use crate::inference::{linear_marginal, sample_posterior, LaplaceFit, NodeMarginal};
use crate::likelihood::Orientation;
use crate::model::{ComponentKind, ModelSpec, SvcBase};
use crate::rng::{standard_normals, stream_rng, Stream};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Visits per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VisitsSpec {
    Fixed(u32),
    Range { min: u32, max: u32 },
}

/// Where simulated sites live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SitePlacement {
    /// n sites uniform in the rectangle.
    Uniform {
        n_sites: usize,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Explicit point sites.
    Points(Vec<(String, f64, f64)>),
    /// n_sites assigned round-robin to the region labels.
    Regions { n_sites: usize, labels: Vec<String> },
    /// Uniform points that also carry the label of the rx-by-ry grid
    /// block containing them (continuous field plus regional effects).
    UniformGridRegions {
        n_sites: usize,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        rx: usize,
        ry: usize,
    },
}

/// Region label of grid block (ix, iy).
pub fn grid_region_label(ix: usize, iy: usize) -> String {
    format!("r{ix}_{iy}")
}

/// Rook-adjacency graph of the rx-by-ry region grid used by
/// `SitePlacement::UniformGridRegions`.
pub fn grid_region_graph(rx: usize, ry: usize) -> crate::data::AdjacencyGraph {
    let mut labels = Vec::new();
    for iy in 0..ry {
        for ix in 0..rx {
            labels.push(grid_region_label(ix, iy));
        }
    }
    let mut edges = Vec::new();
    for iy in 0..ry {
        for ix in 0..rx {
            if ix + 1 < rx {
                edges.push((grid_region_label(ix, iy), grid_region_label(ix + 1, iy)));
            }
            if iy + 1 < ry {
                edges.push((grid_region_label(ix, iy), grid_region_label(ix, iy + 1)));
            }
        }
    }
    crate::data::AdjacencyGraph::new(labels, &edges).expect("grid graph is valid")
}

/// Derived column: the square of another covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedSquare {
    pub name: String,
    pub from: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordAxis {
    X,
    Y,
}

/// Covariate read off the site coordinates (deterministic in space, so
/// prediction grids can evaluate it too).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordCovariate {
    pub name: String,
    pub axis: CoordAxis,
}

/// Layout of a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimLayout {
    pub placement: SitePlacement,
    /// Periods as consecutive integers starting at `first_period`.
    pub n_periods: usize,
    #[serde(default)]
    pub first_period: i64,
    pub visits: VisitsSpec,
    /// Standard-normal site-level covariates (constant over periods).
    #[serde(default)]
    pub site_covariates: Vec<String>,
    /// Standard-normal row-level covariates.
    #[serde(default)]
    pub row_covariates: Vec<String>,
    /// Covariates equal to a site coordinate.
    #[serde(default)]
    pub coord_covariates: Vec<CoordCovariate>,
    #[serde(default)]
    pub derived: Vec<DerivedSquare>,
}

/// True parameter values for a simulation, on the natural scale, keyed by
/// hyperparameter name; fixed effects keyed by component name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTruthParams {
    #[serde(default)]
    pub hyper: BTreeMap<String, f64>,
    #[serde(default)]
    pub fixed_effects: BTreeMap<String, f64>,
}

/// Everything the generator knew: latent fields, probabilities and states.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub x: Vec<f64>,
    pub node_labels: Vec<String>,
    pub eta: Vec<f64>,
    pub psi: Vec<f64>,
    pub p: Vec<f64>,
    pub z: Vec<u8>,
    pub seed: u64,
    pub theta: Vec<f64>,
}

/// Draw a data set from the generative model: component fields from their
/// GMRF priors (constraint-respecting), fixed effects at their true
/// values, z ~ Bernoulli(psi), y ~ Binomial(K, z p).
pub fn simulate_dataset(
    spec: &ModelSpec,
    layout: &SimLayout,
    truth: &SimTruthParams,
    graph: Option<&crate::data::AdjacencyGraph>,
    seed: u64,
) -> Result<(ObservationTable, SiteGeometry, SimTruth)> {
    // Sites and geometry.
    let mut geometry = SiteGeometry::default();
    let site_ids: Vec<String> = match &layout.placement {
        SitePlacement::Uniform { n_sites, x0, y0, x1, y1 } => {
            let mut rng = stream_rng(seed, Stream::Covariate(u64::MAX));
            (0..*n_sites)
                .map(|i| {
                    let id = format!("s{i}");
                    let x = x0 + (x1 - x0) * rng.random::<f64>();
                    let y = y0 + (y1 - y0) * rng.random::<f64>();
                    geometry.sites.insert(id.clone(), SiteInfo::at(x, y));
                    id
                })
                .collect()
        }
        SitePlacement::Points(points) => points
            .iter()
            .map(|(id, x, y)| {
                geometry.sites.insert(id.clone(), SiteInfo::at(*x, *y));
                id.clone()
            })
            .collect(),
        SitePlacement::Regions { n_sites, labels } => (0..*n_sites)
            .map(|i| {
                let id = format!("s{i}");
                let region = labels[i % labels.len()].clone();
                geometry
                    .sites
                    .insert(id.clone(), SiteInfo::in_region(&region));
                id
            })
            .collect(),
        SitePlacement::UniformGridRegions {
            n_sites,
            x0,
            y0,
            x1,
            y1,
            rx,
            ry,
        } => {
            let mut rng = stream_rng(seed, Stream::Covariate(u64::MAX));
            (0..*n_sites)
                .map(|i| {
                    let id = format!("s{i}");
                    let x = x0 + (x1 - x0) * rng.random::<f64>();
                    let y = y0 + (y1 - y0) * rng.random::<f64>();
                    let ix = (((x - x0) / (x1 - x0) * *rx as f64) as usize).min(rx - 1);
                    let iy = (((y - y0) / (y1 - y0) * *ry as f64) as usize).min(ry - 1);
                    geometry.sites.insert(
                        id.clone(),
                        SiteInfo::at(x, y).with_region(&grid_region_label(ix, iy)),
                    );
                    id
                })
                .collect()
        }
    };

    // Row skeleton: site-major, then period.
    let n_sites = site_ids.len();
    let n_rows = n_sites * layout.n_periods;
    let mut rows_site = Vec::with_capacity(n_rows);
    let mut rows_period = Vec::with_capacity(n_rows);
    for s in &site_ids {
        for t in 0..layout.n_periods {
            rows_site.push(s.clone());
            rows_period.push(layout.first_period + t as i64);
        }
    }
    let mut visit_rng = stream_rng(seed, Stream::Covariate(u64::MAX - 1));
    let k: Vec<u32> = (0..n_rows)
        .map(|_| match layout.visits {
            VisitsSpec::Fixed(k) => k,
            VisitsSpec::Range { min, max } => visit_rng.random_range(min..=max),
        })
        .collect();

    // Covariates.
    let mut covariates: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (c, name) in layout.site_covariates.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Covariate(c as u64));
        let per_site = standard_normals(&mut rng, n_sites);
        let col: Vec<f64> = (0..n_rows)
            .map(|r| per_site[r / layout.n_periods])
            .collect();
        covariates.insert(name.clone(), col);
    }
    for (c, name) in layout.row_covariates.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Covariate(1000 + c as u64));
        covariates.insert(name.clone(), standard_normals(&mut rng, n_rows));
    }
    for cc in &layout.coord_covariates {
        let col: Vec<f64> = (0..n_rows)
            .map(|r| {
                let site = &site_ids[r / layout.n_periods];
                let (x, y) = geometry.sites[site].point.unwrap_or((0.0, 0.0));
                match cc.axis {
                    CoordAxis::X => x,
                    CoordAxis::Y => y,
                }
            })
            .collect();
        covariates.insert(cc.name.clone(), col);
    }
    // Time covariates: the raw period index and its centered version.
    let t_idx: Vec<f64> = (0..n_rows)
        .map(|r| (r % layout.n_periods) as f64)
        .collect();
    let t_mean = (layout.n_periods as f64 - 1.0) / 2.0;
    covariates.insert("_t".to_string(), t_idx.clone());
    covariates.insert(
        "_t_centered".to_string(),
        t_idx.iter().map(|t| t - t_mean).collect(),
    );
    for d in &layout.derived {
        let base = covariates
            .get(&d.from)
            .ok_or_else(|| Error::UnknownCovariate(d.from.clone()))?
            .clone();
        covariates.insert(d.name.clone(), base.iter().map(|v| v * v).collect());
    }

    let skeleton = ObservationTable::new(
        rows_site,
        rows_period,
        vec![0; n_rows],
        k.clone(),
        covariates,
    )?;
    let bound = BoundModel::bind(spec, &skeleton, Some(&geometry), graph)?;

    // True hyperparameters by name, natural scale in the config.
    let mut theta = bound.hyper.init();
    for (j, entry) in bound.hyper.entries.iter().enumerate() {
        match truth.hyper.get(&entry.name) {
            Some(&nat) => theta[j] = entry.transform.from_natural(nat),
            None => {
                return Err(Error::InvalidModel(format!(
                    "simulation truth missing hyperparameter `{}`",
                    entry.name
                )))
            }
        }
    }

    // Latent field from the prior, constraint-projected, fixed effects
    // overwritten by their true values.
    let q = bound.precision(&theta);
    let factor = q.factorize()?;
    let mut field_rng = stream_rng(seed, Stream::Field(0));
    let z_white = standard_normals(&mut field_rng, bound.n_latent);
    let mut x = factor.sample_from_white(&z_white);
    if !bound.constraints.is_empty() {
        crate::inference::project_sample_onto_constraints(&factor, &bound.constraints, &mut x);
    }
    for name in bound.fixed_effect_names() {
        let range = bound.block_range(&name)?;
        let value = truth.fixed_effects.get(&name).copied().ok_or_else(|| {
            Error::InvalidModel(format!("simulation truth missing fixed effect `{name}`"))
        })?;
        x[range.start] = value;
    }

    // Probabilities and observations.
    let eta = bound.projector.mul_vec(&x);
    let pred_probs: Vec<f64> = eta.iter().map(|&e| spec.link.inv(e)).collect();
    let hyper_probs = bound.hyper_side_probs(&theta);
    let (psi, p): (Vec<f64>, Vec<f64>) = match spec.orientation {
        Orientation::Occupancy => (pred_probs, hyper_probs),
        Orientation::Detection => (hyper_probs, pred_probs),
    };
    let mut obs_rng = stream_rng(seed, Stream::Observation);
    let mut z = vec![0u8; n_rows];
    let mut y = vec![0u32; n_rows];
    for r in 0..n_rows {
        z[r] = u8::from(obs_rng.random::<f64>() < psi[r]);
        if z[r] == 1 {
            for _ in 0..k[r] {
                if obs_rng.random::<f64>() < p[r] {
                    y[r] += 1;
                }
            }
        }
    }

    let table = ObservationTable::new(
        skeleton.site_ids.clone(),
        skeleton.periods.clone(),
        y,
        k,
        skeleton.covariates.clone(),
    )?;
    let truth_out = SimTruth {
        x,
        node_labels: bound.node_labels.clone(),
        eta,
        psi,
        p,
        z,
        seed,
        theta,
    };
    Ok((table, geometry, truth_out))
}

/// One summarized prediction location.
#[derive(Debug, Clone)]
pub struct SurfaceRow {
    pub site_id: String,
    pub period: i64,
    pub x: Option<f64>,
    pub y: Option<f64>,
    /// False when the location falls outside the model's spatial domain;
    /// such rows carry no values rather than extrapolations.
    pub in_domain: bool,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    /// q975 - q025.
    pub band: f64,
}

fn empirical_quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Posterior predictive surface of the predictor-driven probability at
/// arbitrary locations: posterior draws of eta mapped through the inverse
/// link and summarized per row. Deterministic under (fit, seed).
pub fn predict_rows(
    bound: &BoundModel,
    fit: &LaplaceFit,
    table: &ObservationTable,
    geometry: Option<&SiteGeometry>,
    graph: Option<&crate::data::AdjacencyGraph>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SurfaceRow>> {
    let (proj, in_domain) = bound.build_projector(table, geometry, graph)?;
    let draws = sample_posterior(fit, n_samples, seed);
    let link = bound.spec.link;
    let etas: Vec<Vec<f64>> = draws.x.iter().map(|x| proj.mul_vec(x)).collect();
    let mut out = Vec::with_capacity(table.n_rows());
    for r in 0..table.n_rows() {
        let (px, py) = match geometry.map(|g| g.get(&table.site_ids[r])) {
            Some(Ok(info)) => (info.point.map(|p| p.0), info.point.map(|p| p.1)),
            _ => (None, None),
        };
        if !in_domain[r] {
            out.push(SurfaceRow {
                site_id: table.site_ids[r].clone(),
                period: table.periods[r],
                x: px,
                y: py,
                in_domain: false,
                mean: f64::NAN,
                sd: f64::NAN,
                q025: f64::NAN,
                q500: f64::NAN,
                q975: f64::NAN,
                band: f64::NAN,
            });
            continue;
        }
        let mut probs: Vec<f64> = etas.iter().map(|eta| link.inv(eta[r])).collect();
        probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = probs.len() as f64;
        let mean = probs.iter().sum::<f64>() / n;
        let var = probs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let q025 = empirical_quantile(&probs, 0.025);
        let q975 = empirical_quantile(&probs, 0.975);
        out.push(SurfaceRow {
            site_id: table.site_ids[r].clone(),
            period: table.periods[r],
            x: px,
            y: py,
            in_domain: true,
            mean,
            sd: var.sqrt(),
            q025,
            q500: empirical_quantile(&probs, 0.5),
            q975,
            band: q975 - q025,
        });
    }
    Ok(out)
}

/// Per-cell width of the central 95% interval.
pub fn quantile_band(rows: &[SurfaceRow]) -> Vec<f64> {
    rows.iter().map(|r| r.band).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendLabel {
    Negative,
    None,
    Positive,
}

/// Significance of one space-varying coefficient unit.
#[derive(Debug, Clone)]
pub struct SvcSignificance {
    /// Lattice node index or region index within the component.
    pub unit: usize,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub marginal: NodeMarginal,
    pub label: TrendLabel,
}

/// Label each unit of a space-varying trend by whether its 95% credible
/// interval excludes zero.
pub fn svc_significance(
    bound: &BoundModel,
    fit: &LaplaceFit,
    component: &str,
) -> Result<Vec<SvcSignificance>> {
    let def = bound
        .spec
        .components
        .iter()
        .find(|c| c.name == component)
        .ok_or_else(|| Error::ComponentNotFound(component.to_string()))?;
    let range = bound.block_range(component)?;
    let units: Vec<(usize, Vec<usize>, Vec<f64>, Option<(f64, f64)>)> = match &def.kind {
        ComponentKind::Svc { base, .. } => match base {
            SvcBase::Matern { lattice } => (0..lattice.n_nodes())
                .map(|i| {
                    let (ix, iy) = (i % lattice.nx, i / lattice.nx);
                    let xy = (
                        lattice.x0 + ix as f64 * lattice.spacing,
                        lattice.y0 + iy as f64 * lattice.spacing,
                    );
                    (i, vec![range.start + i], vec![1.0], Some(xy))
                })
                .collect(),
            SvcBase::Bym => {
                // Total effect u_i + v_i per region.
                let n = range.len() / 2;
                (0..n)
                    .map(|i| {
                        (
                            i,
                            vec![range.start + i, range.start + n + i],
                            vec![1.0, 1.0],
                            None,
                        )
                    })
                    .collect()
            }
        },
        _ => {
            return Err(Error::ComponentNotFound(format!(
                "`{component}` is not a space-varying coefficient component"
            )))
        }
    };
    let mut out = Vec::with_capacity(units.len());
    for (unit, idx, val, xy) in units {
        let marginal = linear_marginal(fit, &idx, &val);
        let label = if marginal.q975 < 0.0 {
            TrendLabel::Negative
        } else if marginal.q025 > 0.0 {
            TrendLabel::Positive
        } else {
            TrendLabel::None
        };
        out.push(SvcSignificance {
            unit,
            x: xy.map(|p| p.0),
            y: xy.map(|p| p.1),
            marginal,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // The heavier generative checks live in the integration tests; here
    // only the pure helpers.
    #[test]
    fn empirical_quantiles_interpolate() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&v, 1.0), 5.0);
        assert_eq!(empirical_quantile(&v, 0.5), 3.0);
        assert!((empirical_quantile(&v, 0.25) - 2.0).abs() < 1e-12);
    }
}
