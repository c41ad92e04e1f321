//! Precision-matrix builders for every latent component and the binding of
//! a `ModelSpec` to observed data: node layout, sparse projector rows,
//! constraints and per-hyperparameter precision refills.

use crate::data::{AdjacencyGraph, ObservationTable, SiteGeometry};
use crate::error::{Error, Result};
use crate::likelihood::ZibObs;
use crate::model::*;
use crate::sparse::{Constraint, Projector, SparseSym, Symbolic, Triplets};
use indexmap::IndexMap;
use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::OnceLock;

/// Relative diagonal jitter making intrinsic prior blocks factorizable.
/// It scales with the block precision, so log-determinants stay exactly
/// linear in log tau.
pub const INTRINSIC_JITTER: f64 = 1e-6;

/// Hyper-side probabilities are clamped into (PROB_EPS, 1 - PROB_EPS).
pub const PROB_EPS: f64 = 1e-12;

/// Stationary AR1 precision with marginal variance 1/tau:
/// Q = tau/(1-rho^2) * tridiag(-rho; 1, 1+rho^2, ..., 1).
pub fn ar1_precision(n: usize, rho: f64, tau: f64) -> Result<SparseSym> {
    if !(rho.abs() < 1.0) {
        return Err(Error::DomainError(format!("|rho| = {} >= 1", rho.abs())));
    }
    if tau <= 0.0 {
        return Err(Error::DomainError("tau must be positive".into()));
    }
    if n == 0 {
        return Err(Error::DomainError("AR1 needs at least one node".into()));
    }
    let mut t = Triplets::new(n);
    if n == 1 {
        t.push(0, 0, tau);
        return Ok(t.build());
    }
    let s = tau / (1.0 - rho * rho);
    for i in 0..n {
        let d = if i == 0 || i == n - 1 {
            1.0
        } else {
            1.0 + rho * rho
        };
        t.push(i, i, s * d);
        if i + 1 < n {
            t.push(i, i + 1, -s * rho);
        }
    }
    Ok(t.build())
}

/// Random-walk structure matrix D_k^T D_k of the given order.
pub fn rw_structure(order: u8, n: usize) -> Result<SparseSym> {
    if n < order as usize + 1 {
        return Err(Error::DomainError(format!(
            "RW{order} needs at least {} nodes, got {n}",
            order as usize + 1
        )));
    }
    let mut t = Triplets::new(n);
    match order {
        1 => {
            for i in 0..n - 1 {
                t.push(i, i, 1.0);
                t.push(i + 1, i + 1, 1.0);
                t.push(i, i + 1, -1.0);
            }
        }
        2 => {
            for i in 0..n - 2 {
                let idx = [i, i + 1, i + 2];
                let coef = [1.0, -2.0, 1.0];
                for a in 0..3 {
                    for b in a..3 {
                        t.push(idx[a], idx[b], coef[a] * coef[b]);
                    }
                }
            }
        }
        _ => return Err(Error::DomainError("RW order must be 1 or 2".into())),
    }
    Ok(t.build())
}

/// Null-space constraints of the RW structure: sum-to-zero, plus a
/// zero-mean-slope row for order 2.
pub fn rw_constraints(order: u8, n: usize) -> Vec<Constraint> {
    let mut out = vec![Constraint {
        idx: (0..n).collect(),
        val: vec![1.0; n],
    }];
    if order == 2 {
        let center = (n as f64 - 1.0) / 2.0;
        out.push(Constraint {
            idx: (0..n).collect(),
            val: (0..n).map(|i| i as f64 - center).collect(),
        });
    }
    out
}

/// Geometric-mean marginal variance of the intrinsic model under its
/// null-space constraints, from the dense pseudo-inverse.
fn intrinsic_geomean_variance(structure: &SparseSym) -> f64 {
    let dense = structure.to_dense();
    let eig = nalgebra::SymmetricEigen::new(dense);
    let maxev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = 1e-9 * maxev.max(1.0);
    let n = structure.n();
    let mut logsum = 0.0;
    for i in 0..n {
        let mut var = 0.0;
        for k in 0..n {
            let ev = eig.eigenvalues[k];
            if ev > tol {
                let v = eig.eigenvectors[(i, k)];
                var += v * v / ev;
            }
        }
        logsum += var.ln();
    }
    (logsum / n as f64).exp()
}

/// RW precision tau * R with constraints; when `scaled`, R is rescaled so
/// the geometric mean of the constrained marginal variances is one.
pub fn rw_precision(
    order: u8,
    n: usize,
    tau: f64,
    scaled: bool,
) -> Result<(SparseSym, Vec<Constraint>)> {
    let structure = rw_structure(order, n)?;
    let factor = if scaled {
        intrinsic_geomean_variance(&structure)
    } else {
        1.0
    };
    let mut t = Triplets::new(n);
    for (i, j, v) in structure.iter_upper() {
        t.push(i, j, tau * factor * v);
    }
    Ok((t.build(), rw_constraints(order, n)))
}

/// Besag (intrinsic CAR) structure: degree on the diagonal, -1 between
/// neighbours.
pub fn besag_structure(graph: &AdjacencyGraph) -> Result<SparseSym> {
    let n = graph.n_regions();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut t = Triplets::new(n);
    let mut degree = vec![0.0f64; n];
    for &(a, b) in &graph.edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
        t.push(a, b, -1.0);
    }
    for i in 0..n {
        t.push(i, i, degree[i]);
    }
    Ok(t.build())
}

/// Besag precision tau * (D - W) with one sum-to-zero constraint per
/// connected component.
pub fn besag_precision(graph: &AdjacencyGraph, tau: f64) -> Result<(SparseSym, Vec<Constraint>)> {
    let structure = besag_structure(graph)?;
    let mut t = Triplets::new(structure.n());
    for (i, j, v) in structure.iter_upper() {
        t.push(i, j, tau * v);
    }
    let constraints = graph
        .connected_components()
        .into_iter()
        .map(|comp| Constraint {
            val: vec![1.0; comp.len()],
            idx: comp,
        })
        .collect();
    Ok((t.build(), constraints))
}

/// BYM precision over the stacked (u, v) vector: block-diagonal Besag and
/// IID parts; the projector maps an observation in region i to u_i + v_i.
pub fn bym_precision(
    graph: &AdjacencyGraph,
    tau_u: f64,
    tau_v: f64,
) -> Result<(SparseSym, Vec<Constraint>)> {
    let n = graph.n_regions();
    let (besag, constraints) = besag_precision(graph, tau_u)?;
    let mut t = Triplets::new(2 * n);
    for (i, j, v) in besag.iter_upper() {
        t.push(i, j, v);
    }
    for i in 0..n {
        t.push(n + i, n + i, tau_v);
    }
    Ok((t.build(), constraints))
}

/// Fixed lattice arrays for the Matern SPDE discretization: lumped mass
/// (per-node cell area), the five-point stiffness G and the two-hop
/// product G C^-1 G.
#[derive(Debug, Clone)]
pub struct MaternPattern {
    pub mass: Vec<f64>,
    pub g: SparseSym,
    pub gcg: SparseSym,
}

pub fn matern_pattern(lat: &LatticeSpec) -> Result<MaternPattern> {
    let (nx, ny, h) = (lat.nx, lat.ny, lat.spacing);
    if nx < 4 || ny < 4 {
        return Err(Error::DomainError("lattice needs nx, ny >= 4".into()));
    }
    if h <= 0.0 {
        return Err(Error::DomainError("lattice spacing must be positive".into()));
    }
    let n = nx * ny;
    let node = |ix: usize, iy: usize| iy * nx + ix;
    let mut mass = vec![0.0; n];
    for iy in 0..ny {
        for ix in 0..nx {
            let cx = if ix > 0 && ix < nx - 1 { 2.0 } else { 1.0 };
            let cy = if iy > 0 && iy < ny - 1 { 2.0 } else { 1.0 };
            mass[node(ix, iy)] = h * h * cx * cy / 4.0;
        }
    }
    let mut gt = Triplets::new(n);
    for iy in 0..ny {
        for ix in 0..nx {
            let i = node(ix, iy);
            let mut deg = 0.0;
            if ix + 1 < nx {
                gt.push(i, node(ix + 1, iy), -1.0);
                deg += 1.0;
            }
            if ix > 0 {
                deg += 1.0;
            }
            if iy + 1 < ny {
                gt.push(i, node(ix, iy + 1), -1.0);
                deg += 1.0;
            }
            if iy > 0 {
                deg += 1.0;
            }
            gt.push(i, i, deg);
        }
    }
    let g = gt.build();
    // (G C^-1 G)_{ij} = sum_m G_im G_jm / c_m: accumulate per column m.
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, j, v) in g.iter_full() {
        cols[j].push((i, v));
    }
    let mut gcg = Triplets::new(n);
    for (m, col) in cols.iter().enumerate() {
        let cm = mass[m];
        for a in 0..col.len() {
            for b in a..col.len() {
                let (ia, va) = col[a];
                let (ib, vb) = col[b];
                if ia <= ib {
                    gcg.push(ia, ib, va * vb / cm);
                } else {
                    gcg.push(ib, ia, va * vb / cm);
                }
            }
        }
    }
    Ok(MaternPattern {
        mass,
        g,
        gcg: gcg.build(),
    })
}

/// Matern lattice precision (smoothness alpha = 2):
/// Q = tau_spde^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G); the interior
/// marginal variance is about 1 / (4 pi kappa^2 tau_spde^2).
pub fn matern_lattice_precision(lat: &LatticeSpec, kappa: f64, tau_spde: f64) -> Result<SparseSym> {
    if kappa <= 0.0 || tau_spde <= 0.0 {
        return Err(Error::DomainError("kappa, tau must be positive".into()));
    }
    let pat = matern_pattern(lat)?;
    Ok(fill_matern(&pat, lat.n_nodes(), kappa, tau_spde * tau_spde))
}

fn fill_matern(pat: &MaternPattern, n: usize, kappa: f64, tau_spde_sq: f64) -> SparseSym {
    let k2 = kappa * kappa;
    let mut t = Triplets::new(n);
    for (i, &m) in pat.mass.iter().enumerate() {
        t.push(i, i, tau_spde_sq * k2 * k2 * m);
    }
    for (i, j, v) in pat.g.iter_upper() {
        t.push(i, j, tau_spde_sq * 2.0 * k2 * v);
    }
    for (i, j, v) in pat.gcg.iter_upper() {
        t.push(i, j, tau_spde_sq * v);
    }
    t.build()
}

/// Separable space-time precision: Q_AR1(n_periods, rho; tau = 1) (x)
/// Q_space, node order period-major.
pub fn spacetime_precision(
    q_space: &SparseSym,
    n_periods: usize,
    rho_time: f64,
) -> Result<SparseSym> {
    let q_time = ar1_precision(n_periods, rho_time, 1.0)?;
    Ok(q_time.kron(q_space))
}

// ---------------------------------------------------------------------
// Binding a specification to data.
// ---------------------------------------------------------------------

/// How a block's precision values are refilled for a hyperparameter value.
#[derive(Debug, Clone)]
pub(crate) enum BlockFill {
    /// Fixed-effect node with a constant prior precision.
    FixedDiagonal { precision: f64 },
    /// tau(theta) * structure; intrinsic jitter is baked into `structure`.
    Scaled { structure: SparseSym, tau: usize },
    /// Two stacked scaled blocks (BYM: u then v).
    ScaledPair {
        structure_u: SparseSym,
        tau_u: usize,
        n: usize,
        tau_v: usize,
    },
    Ar1 { n: usize, tau: usize, rho: usize },
    Matern {
        pattern: MaternPattern,
        tau_marginal: usize,
        kappa: usize,
    },
    SpaceTime {
        pattern: MaternPattern,
        n_space: usize,
        n_periods: usize,
        tau_marginal: usize,
        kappa: usize,
        rho: usize,
    },
}

/// How a table row projects onto a block's nodes.
#[derive(Debug, Clone)]
enum ProjBinding {
    Intercept,
    Linear { covariate: String },
    SiteIndex,
    PeriodIndex,
    RwBins {
        covariate: String,
        min: f64,
        width: f64,
        bins: usize,
    },
    Region,
    RegionPair { n: usize },
    Lattice { lat: LatticeSpec },
    LatticeTime { lat: LatticeSpec },
    Svc {
        inner: Box<ProjBinding>,
        weight: String,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) name: String,
    pub(crate) range: Range<usize>,
    pub(crate) fill: BlockFill,
    proj: ProjBinding,
}

/// A model specification resolved against a data set: fixed node layout,
/// fixed projector pattern, constraints, and per-theta precision refills.
pub struct BoundModel {
    pub spec: ModelSpec,
    pub hyper: HyperSpec,
    pub n_latent: usize,
    pub projector: Projector,
    pub constraints: Vec<Constraint>,
    pub y: Vec<u32>,
    pub k: Vec<u32>,
    pub node_labels: Vec<String>,
    row_sites: Vec<String>,
    row_periods: Vec<i64>,
    blocks: Vec<Block>,
    /// Detection covariate columns in spec order, row-major per column.
    det_cols: Vec<Vec<f64>>,
    det_fixed: Option<Vec<f64>>,
    det_hyper_start: Option<usize>,
    site_index: IndexMap<String, usize>,
    period_index: BTreeMap<i64, usize>,
    symbolic_q: OnceLock<Symbolic>,
    symbolic_h: OnceLock<Symbolic>,
}

/// Context for building projector rows from any table.
struct RowCtx<'a> {
    table: &'a ObservationTable,
    geometry: Option<&'a SiteGeometry>,
    site_index: &'a IndexMap<String, usize>,
    period_index: &'a BTreeMap<i64, usize>,
    graph_labels: Option<&'a BTreeMap<String, usize>>,
}

impl BoundModel {
    pub fn bind(
        spec: &ModelSpec,
        table: &ObservationTable,
        geometry: Option<&SiteGeometry>,
        graph: Option<&AdjacencyGraph>,
    ) -> Result<Self> {
        spec.validate()?;
        table.validate()?;
        if let Some(g) = geometry {
            g.validate_covers(table)?;
        }

        let (site_ids, _) = table.site_index();
        let site_index: IndexMap<String, usize> = site_ids
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let (periods, _) = table.period_index();
        let period_index: BTreeMap<i64, usize> =
            periods.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let n_periods = periods.len();
        let n_sites = site_index.len();

        let mut hyper = HyperSpec::default();
        let mut blocks: Vec<Block> = Vec::new();
        let mut constraints: Vec<Constraint> = Vec::new();
        let mut node_labels: Vec<String> = Vec::new();
        let mut offset = 0usize;

        for def in &spec.components {
            let (size, fill, proj, comp_constraints) = bind_component(
                def,
                table,
                graph,
                n_sites,
                n_periods,
                &mut hyper,
            )?;
            for c in comp_constraints {
                constraints.push(c.shift(offset));
            }
            if def.sum_to_zero && !matches!(def.kind, ComponentKind::RandomWalk { .. })
                && !matches!(def.kind, ComponentKind::Besag | ComponentKind::Bym)
            {
                constraints.push(Constraint {
                    idx: (offset..offset + size).collect(),
                    val: vec![1.0; size],
                });
            }
            if size == 1 {
                node_labels.push(def.name.clone());
            } else {
                for i in 0..size {
                    node_labels.push(format!("{}[{i}]", def.name));
                }
            }
            blocks.push(Block {
                name: def.name.clone(),
                range: offset..offset + size,
                fill,
                proj,
            });
            offset += size;
        }

        // Detection coefficients become hyperparameters unless fixed.
        let det_hyper_start = if spec.detection.fixed.is_none() {
            let start = hyper.entries.len();
            let prior = spec.detection.prior.unwrap_or(DEFAULT_ALPHA_PRIOR);
            let inits = spec.detection.init.clone().unwrap_or_default();
            let names: Vec<String> = std::iter::once("alpha0".to_string())
                .chain(
                    spec.detection
                        .covariates
                        .iter()
                        .map(|c| format!("alpha_{c}")),
                )
                .collect();
            for (i, name) in names.into_iter().enumerate() {
                hyper.entries.push(HyperEntry {
                    name,
                    transform: Transform::Identity,
                    prior,
                    init: inits.get(i).copied().unwrap_or(0.0),
                });
            }
            Some(start)
        } else {
            None
        };
        hyper.validate()?;

        let det_cols: Vec<Vec<f64>> = spec
            .detection
            .covariates
            .iter()
            .map(|c| table.covariate(c).map(|v| v.to_vec()))
            .collect::<Result<_>>()?;

        let mut bound = Self {
            spec: spec.clone(),
            hyper,
            n_latent: offset,
            projector: Projector::from_rows(offset, vec![]),
            constraints,
            y: table.y.clone(),
            k: table.k.clone(),
            node_labels,
            row_sites: table.site_ids.clone(),
            row_periods: table.periods.clone(),
            blocks,
            det_cols,
            det_fixed: spec.detection.fixed.clone(),
            det_hyper_start,
            site_index,
            period_index,
            symbolic_q: OnceLock::new(),
            symbolic_h: OnceLock::new(),
        };
        let (proj, in_domain) = bound.build_projector(table, geometry, graph)?;
        if let Some(row) = in_domain.iter().position(|&ok| !ok) {
            return Err(Error::DomainError(format!(
                "observation row {row} (site {}) falls outside the model domain",
                table.site_ids[row]
            )));
        }
        bound.projector = proj;
        Ok(bound)
    }

    /// Projector rows for an arbitrary table under this model's bindings.
    /// Rows touching nodes outside the spatial domain are returned empty
    /// with their flag cleared instead of failing.
    pub fn build_projector(
        &self,
        table: &ObservationTable,
        geometry: Option<&SiteGeometry>,
        graph: Option<&AdjacencyGraph>,
    ) -> Result<(Projector, Vec<bool>)> {
        let graph_labels: Option<BTreeMap<String, usize>> = graph.map(|g| {
            g.labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect()
        });
        let ctx = RowCtx {
            table,
            geometry,
            site_index: &self.site_index,
            period_index: &self.period_index,
            graph_labels: graph_labels.as_ref(),
        };
        let mut rows = Vec::with_capacity(table.n_rows());
        let mut in_domain = vec![true; table.n_rows()];
        for r in 0..table.n_rows() {
            let mut row = Vec::new();
            let mut ok = true;
            for block in &self.blocks {
                match block_row_entries(&block.proj, block.range.start, r, &ctx)? {
                    Some(entries) => row.extend(entries),
                    None => ok = false,
                }
            }
            if !ok {
                row.clear();
            }
            in_domain[r] = ok;
            rows.push(row);
        }
        Ok((Projector::from_rows(self.n_latent, rows), in_domain))
    }

    /// The joint prior precision Q(theta) over all latent nodes.
    pub fn precision(&self, theta: &[f64]) -> SparseSym {
        assert_eq!(theta.len(), self.hyper.dim());
        let mut t = Triplets::new(self.n_latent);
        for block in &self.blocks {
            let off = block.range.start;
            match &block.fill {
                BlockFill::FixedDiagonal { precision } => t.push(off, off, *precision),
                BlockFill::Scaled { structure, tau } => {
                    let tau = self.precision_at(*tau, theta);
                    for (i, j, v) in structure.iter_upper() {
                        t.push(off + i, off + j, tau * v);
                    }
                }
                BlockFill::ScaledPair {
                    structure_u,
                    tau_u,
                    n,
                    tau_v,
                } => {
                    let tu = self.precision_at(*tau_u, theta);
                    let tv = self.precision_at(*tau_v, theta);
                    for (i, j, v) in structure_u.iter_upper() {
                        t.push(off + i, off + j, tu * v);
                    }
                    for i in 0..*n {
                        t.push(off + n + i, off + n + i, tv);
                    }
                }
                BlockFill::Ar1 { n, tau, rho } => {
                    let tau = self.precision_at(*tau, theta);
                    let rho = Transform::FisherRho.to_natural(theta[*rho]);
                    let q = ar1_precision(*n, rho, tau).expect("bounded rho");
                    for (i, j, v) in q.iter_upper() {
                        t.push(off + i, off + j, v);
                    }
                }
                BlockFill::Matern {
                    pattern,
                    tau_marginal,
                    kappa,
                } => {
                    let tau_m = self.precision_at(*tau_marginal, theta);
                    let kappa = theta[*kappa].exp();
                    let tau_spde_sq = tau_m / (4.0 * std::f64::consts::PI * kappa * kappa);
                    let q = fill_matern(pattern, pattern.mass.len(), kappa, tau_spde_sq);
                    for (i, j, v) in q.iter_upper() {
                        t.push(off + i, off + j, v);
                    }
                }
                BlockFill::SpaceTime {
                    pattern,
                    n_space,
                    n_periods,
                    tau_marginal,
                    kappa,
                    rho,
                } => {
                    let tau_m = self.precision_at(*tau_marginal, theta);
                    let kappa = theta[*kappa].exp();
                    let rho = Transform::FisherRho.to_natural(theta[*rho]);
                    let tau_spde_sq = tau_m / (4.0 * std::f64::consts::PI * kappa * kappa);
                    let q_space = fill_matern(pattern, *n_space, kappa, tau_spde_sq);
                    let q = spacetime_precision(&q_space, *n_periods, rho).expect("bounded rho");
                    for (i, j, v) in q.iter_upper() {
                        t.push(off + i, off + j, v);
                    }
                }
            }
        }
        t.build()
    }

    fn precision_at(&self, idx: usize, theta: &[f64]) -> f64 {
        self.hyper.entries[idx].transform.precision_value(theta[idx])
    }

    /// Per-row hyper-side probabilities (detection probabilities under the
    /// default orientation).
    pub fn hyper_side_probs(&self, theta: &[f64]) -> Vec<f64> {
        self.hyper_side_probs_for(theta, &self.det_cols, self.y.len())
    }

    /// Same, for externally supplied covariate columns (simulation).
    pub fn hyper_side_probs_for(
        &self,
        theta: &[f64],
        det_cols: &[Vec<f64>],
        n_rows: usize,
    ) -> Vec<f64> {
        let alpha: Vec<f64> = match (&self.det_fixed, self.det_hyper_start) {
            (Some(fixed), _) => fixed.clone(),
            (None, Some(start)) => theta[start..start + 1 + det_cols.len()].to_vec(),
            _ => unreachable!("detection model must be fixed or hyper"),
        };
        (0..n_rows)
            .map(|r| {
                let lin = alpha[0]
                    + alpha[1..]
                        .iter()
                        .zip(det_cols)
                        .map(|(a, col)| a * col[r])
                        .sum::<f64>();
                // Keep the probability inside the open interval: extreme
                // coefficients explored by the outer optimizer would
                // otherwise saturate to 0 or 1 in f64.
                self.spec.detection.link.inv(lin).clamp(PROB_EPS, 1.0 - PROB_EPS)
            })
            .collect()
    }

    /// Alpha values as implied by theta (or the fixed constants).
    pub fn detection_coefs(&self, theta: &[f64]) -> Vec<f64> {
        match (&self.det_fixed, self.det_hyper_start) {
            (Some(fixed), _) => fixed.clone(),
            (None, Some(start)) => theta[start..start + 1 + self.det_cols.len()].to_vec(),
            _ => unreachable!(),
        }
    }

    /// The observation model at theta for this data.
    pub fn obs_model(&self, theta: &[f64]) -> Result<ZibObs> {
        ZibObs::new(
            self.y.clone(),
            self.k.clone(),
            self.hyper_side_probs(theta),
            self.spec.link,
            self.spec.orientation,
        )
    }

    /// The observation model with explicit hyper-side coefficients
    /// (posterior means, for instance).
    pub fn obs_model_with_coefs(&self, alpha: &[f64]) -> Result<ZibObs> {
        let n = self.y.len();
        let probs: Vec<f64> = (0..n)
            .map(|r| {
                let lin = alpha[0]
                    + alpha[1..]
                        .iter()
                        .zip(&self.det_cols)
                        .map(|(a, col)| a * col[r])
                        .sum::<f64>();
                self.spec.detection.link.inv(lin).clamp(PROB_EPS, 1.0 - PROB_EPS)
            })
            .collect();
        ZibObs::new(
            self.y.clone(),
            self.k.clone(),
            probs,
            self.spec.link,
            self.spec.orientation,
        )
    }

    pub fn block_range(&self, name: &str) -> Result<Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.range.clone())
            .ok_or_else(|| Error::ComponentNotFound(name.to_string()))
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    /// Names of single-node fixed-effect blocks (intercept / linear).
    pub fn fixed_effect_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .filter(|b| matches!(b.fill, BlockFill::FixedDiagonal { .. }))
            .map(|b| b.name.clone())
            .collect()
    }

    pub fn is_bym(&self, name: &str) -> bool {
        self.blocks
            .iter()
            .any(|b| b.name == name && matches!(b.fill, BlockFill::ScaledPair { .. }))
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub(crate) fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn row_site(&self, i: usize) -> String {
        self.row_sites[i].clone()
    }

    pub fn row_period(&self, i: usize) -> i64 {
        self.row_periods[i]
    }

    pub fn n_periods(&self) -> usize {
        self.period_index.len()
    }

    pub fn n_sites(&self) -> usize {
        self.site_index.len()
    }

    pub fn periods(&self) -> Vec<i64> {
        self.period_index.keys().copied().collect()
    }

    /// Symbolic factorization of the prior pattern (cached).
    pub fn symbolic_q(&self, theta: &[f64]) -> &Symbolic {
        self.symbolic_q.get_or_init(|| self.precision(theta).symbolic())
    }

    /// Symbolic factorization of the posterior-Hessian pattern (cached).
    pub fn symbolic_h(&self, theta: &[f64]) -> &Symbolic {
        self.symbolic_h.get_or_init(|| {
            let q = self.precision(theta);
            let mut t = q.to_triplets();
            let w = vec![1.0; self.projector.nrows()];
            t.append_shifted(&self.projector.atwa(&w).build().to_triplets(), 0);
            t.build().symbolic()
        })
    }
}

fn bind_component(
    def: &ComponentDef,
    table: &ObservationTable,
    graph: Option<&AdjacencyGraph>,
    n_sites: usize,
    n_periods: usize,
    hyper: &mut HyperSpec,
) -> Result<(usize, BlockFill, ProjBinding, Vec<Constraint>)> {
    let name = &def.name;
    let pr = &def.priors;
    let prec_transform = if pr.precision_as_stdev {
        Transform::LogStdev
    } else {
        Transform::LogPrecision
    };
    let add_precision = |hyper: &mut HyperSpec, suffix: &str, prior: Option<PriorDist>, init: Option<f64>| {
        let idx = hyper.entries.len();
        hyper.entries.push(HyperEntry {
            name: format!("{name}.{suffix}"),
            transform: prec_transform,
            prior: prior.unwrap_or(DEFAULT_PC_PRECISION),
            init: init.unwrap_or(0.0),
        });
        idx
    };

    match &def.kind {
        ComponentKind::Intercept => Ok((
            1,
            BlockFill::FixedDiagonal {
                precision: def
                    .fixed_prior_precision
                    .unwrap_or(DEFAULT_FIXED_PRIOR_PRECISION),
            },
            ProjBinding::Intercept,
            vec![],
        )),
        ComponentKind::Linear { covariate } => {
            table.covariate(covariate)?;
            Ok((
                1,
                BlockFill::FixedDiagonal {
                    precision: def
                        .fixed_prior_precision
                        .unwrap_or(DEFAULT_FIXED_PRIOR_PRECISION),
                },
                ProjBinding::Linear {
                    covariate: covariate.clone(),
                },
                vec![],
            ))
        }
        ComponentKind::Iid { group } => {
            let (size, proj) = match group {
                GroupBy::Site => (n_sites, ProjBinding::SiteIndex),
                GroupBy::Period => (n_periods, ProjBinding::PeriodIndex),
            };
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            Ok((
                size,
                BlockFill::Scaled {
                    structure: SparseSym::identity(size, 1.0),
                    tau,
                },
                proj,
                vec![],
            ))
        }
        ComponentKind::Ar1 => {
            if n_periods < 2 {
                return Err(Error::InvalidModel(format!(
                    "AR1 component `{name}` needs at least 2 periods"
                )));
            }
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            let rho = hyper.entries.len();
            hyper.entries.push(HyperEntry {
                name: format!("{name}.rho"),
                transform: Transform::FisherRho,
                prior: pr.rho.unwrap_or(DEFAULT_RHO_PRIOR),
                init: pr.rho_init.unwrap_or(0.5),
            });
            Ok((
                n_periods,
                BlockFill::Ar1 {
                    n: n_periods,
                    tau,
                    rho,
                },
                ProjBinding::PeriodIndex,
                vec![],
            ))
        }
        ComponentKind::RandomWalk {
            covariate,
            order,
            bins,
            scaled,
        } => {
            let col = table.covariate(covariate)?;
            let bins = (*bins).min(25).max(*order as usize + 1);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(max > min) {
                return Err(Error::ZeroVariance(covariate.clone()));
            }
            let width = (max - min) / bins as f64;
            let structure = rw_structure(*order, bins)?;
            let factor = if *scaled {
                intrinsic_geomean_variance(&structure)
            } else {
                1.0
            };
            let jittered = jitter_intrinsic(&structure, factor);
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            Ok((
                bins,
                BlockFill::Scaled {
                    structure: jittered,
                    tau,
                },
                ProjBinding::RwBins {
                    covariate: covariate.clone(),
                    min,
                    width,
                    bins,
                },
                rw_constraints(*order, bins),
            ))
        }
        ComponentKind::Besag => {
            let graph = graph.ok_or_else(|| {
                Error::InvalidModel(format!("component `{name}` needs an adjacency graph"))
            })?;
            let structure = besag_structure(graph)?;
            let jittered = jitter_intrinsic(&structure, 1.0);
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            let constraints = graph
                .connected_components()
                .into_iter()
                .map(|comp| Constraint {
                    val: vec![1.0; comp.len()],
                    idx: comp,
                })
                .collect();
            Ok((
                graph.n_regions(),
                BlockFill::Scaled {
                    structure: jittered,
                    tau,
                },
                ProjBinding::Region,
                constraints,
            ))
        }
        ComponentKind::Bym => {
            let graph = graph.ok_or_else(|| {
                Error::InvalidModel(format!("component `{name}` needs an adjacency graph"))
            })?;
            let n = graph.n_regions();
            let structure = besag_structure(graph)?;
            let jittered = jitter_intrinsic(&structure, 1.0);
            let tau_u = add_precision(hyper, "log_prec_u", pr.precision, pr.precision_init);
            let tau_v = add_precision(hyper, "log_prec_v", pr.precision2, pr.precision2_init);
            let constraints = graph
                .connected_components()
                .into_iter()
                .map(|comp| Constraint {
                    val: vec![1.0; comp.len()],
                    idx: comp,
                })
                .collect();
            Ok((
                2 * n,
                BlockFill::ScaledPair {
                    structure_u: jittered,
                    tau_u,
                    n,
                    tau_v,
                },
                ProjBinding::RegionPair { n },
                constraints,
            ))
        }
        ComponentKind::Matern { lattice } => {
            let pattern = matern_pattern(lattice)?;
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            let kappa = hyper.entries.len();
            hyper.entries.push(kappa_entry(name, lattice, pr));
            Ok((
                lattice.n_nodes(),
                BlockFill::Matern {
                    pattern,
                    tau_marginal: tau,
                    kappa,
                },
                ProjBinding::Lattice { lat: *lattice },
                vec![],
            ))
        }
        ComponentKind::SpaceTime { lattice, n_periods: np } => {
            let np = np.unwrap_or(n_periods);
            if np != n_periods {
                return Err(Error::InvalidModel(format!(
                    "component `{name}`: n_periods = {np} but data has {n_periods} periods"
                )));
            }
            let pattern = matern_pattern(lattice)?;
            let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
            let kappa = hyper.entries.len();
            hyper.entries.push(kappa_entry(name, lattice, pr));
            let rho = hyper.entries.len();
            hyper.entries.push(HyperEntry {
                name: format!("{name}.rho"),
                transform: Transform::FisherRho,
                prior: pr.rho.unwrap_or(DEFAULT_RHO_PRIOR),
                init: pr.rho_init.unwrap_or(0.5),
            });
            Ok((
                lattice.n_nodes() * np,
                BlockFill::SpaceTime {
                    pattern,
                    n_space: lattice.n_nodes(),
                    n_periods: np,
                    tau_marginal: tau,
                    kappa,
                    rho,
                },
                ProjBinding::LatticeTime { lat: *lattice },
                vec![],
            ))
        }
        ComponentKind::Svc { base, weight } => {
            table.covariate(weight)?;
            match base {
                SvcBase::Matern { lattice } => {
                    let pattern = matern_pattern(lattice)?;
                    let tau = add_precision(hyper, "log_prec", pr.precision, pr.precision_init);
                    let kappa = hyper.entries.len();
                    hyper.entries.push(kappa_entry(name, lattice, pr));
                    Ok((
                        lattice.n_nodes(),
                        BlockFill::Matern {
                            pattern,
                            tau_marginal: tau,
                            kappa,
                        },
                        ProjBinding::Svc {
                            inner: Box::new(ProjBinding::Lattice { lat: *lattice }),
                            weight: weight.clone(),
                        },
                        vec![],
                    ))
                }
                SvcBase::Bym => {
                    let graph = graph.ok_or_else(|| {
                        Error::InvalidModel(format!("component `{name}` needs an adjacency graph"))
                    })?;
                    let n = graph.n_regions();
                    let structure = besag_structure(graph)?;
                    let jittered = jitter_intrinsic(&structure, 1.0);
                    let tau_u =
                        add_precision(hyper, "log_prec_u", pr.precision, pr.precision_init);
                    let tau_v =
                        add_precision(hyper, "log_prec_v", pr.precision2, pr.precision2_init);
                    let constraints = graph
                        .connected_components()
                        .into_iter()
                        .map(|comp| Constraint {
                            val: vec![1.0; comp.len()],
                            idx: comp,
                        })
                        .collect();
                    Ok((
                        2 * n,
                        BlockFill::ScaledPair {
                            structure_u: jittered,
                            tau_u,
                            n,
                            tau_v,
                        },
                        ProjBinding::Svc {
                            inner: Box::new(ProjBinding::RegionPair { n }),
                            weight: weight.clone(),
                        },
                        constraints,
                    ))
                }
            }
        }
    }
}

fn kappa_entry(name: &str, lattice: &LatticeSpec, pr: &ComponentPriors) -> HyperEntry {
    // Default: prior range about a fifth of the longer lattice extent.
    let extent = ((lattice.nx - 1).max(lattice.ny - 1)) as f64 * lattice.spacing;
    let kappa0 = (8.0f64).sqrt() / (0.2 * extent);
    let init = pr.kappa_init.map(|k| k.ln()).unwrap_or(kappa0.ln());
    HyperEntry {
        name: format!("{name}.log_kappa"),
        transform: Transform::LogScale,
        prior: pr.kappa.unwrap_or(PriorDist::Gaussian {
            mean: init,
            precision: 1.0,
        }),
        init,
    }
}

/// Scale a structure matrix and add the relative intrinsic jitter so the
/// block factorizes; isolated nodes receive an absolute jitter instead.
fn jitter_intrinsic(structure: &SparseSym, factor: f64) -> SparseSym {
    let n = structure.n();
    let diag = structure.diag();
    let mut t = Triplets::new(n);
    for (i, j, v) in structure.iter_upper() {
        t.push(i, j, factor * v);
    }
    for i in 0..n {
        let base = if diag[i] > 0.0 {
            factor * diag[i]
        } else {
            1.0
        };
        t.push(i, i, INTRINSIC_JITTER * base);
    }
    t.build()
}

fn block_row_entries(
    proj: &ProjBinding,
    offset: usize,
    row: usize,
    ctx: &RowCtx,
) -> Result<Option<Vec<(usize, f64)>>> {
    match proj {
        ProjBinding::Intercept => Ok(Some(vec![(offset, 1.0)])),
        ProjBinding::Linear { covariate } => {
            let v = ctx.table.covariate(covariate)?[row];
            Ok(Some(vec![(offset, v)]))
        }
        ProjBinding::SiteIndex => {
            // Sites unseen at fit time contribute no indexed effect; the
            // prediction then shows the structured part of the field.
            match ctx.site_index.get(&ctx.table.site_ids[row]) {
                Some(&i) => Ok(Some(vec![(offset + i, 1.0)])),
                None => Ok(Some(vec![])),
            }
        }
        ProjBinding::PeriodIndex => match ctx.period_index.get(&ctx.table.periods[row]) {
            Some(&t) => Ok(Some(vec![(offset + t, 1.0)])),
            None => Err(Error::DomainError(format!(
                "period {} not present in the fitted data",
                ctx.table.periods[row]
            ))),
        },
        ProjBinding::RwBins {
            covariate,
            min,
            width,
            bins,
        } => {
            let v = ctx.table.covariate(covariate)?[row];
            let b = (((v - min) / width).floor() as i64).clamp(0, *bins as i64 - 1) as usize;
            Ok(Some(vec![(offset + b, 1.0)]))
        }
        ProjBinding::Region => Ok(region_of(ctx, row)?.map(|idx| vec![(offset + idx, 1.0)])),
        ProjBinding::RegionPair { n } => Ok(region_of(ctx, row)?
            .map(|idx| vec![(offset + idx, 1.0), (offset + n + idx, 1.0)])),
        ProjBinding::Lattice { lat } => Ok(point_of(ctx, row)?
            .and_then(|(x, y)| bilinear_weights(lat, x, y))
            .map(|w| w.into_iter().map(|(i, v)| (offset + i, v)).collect())),
        ProjBinding::LatticeTime { lat } => {
            let t = match ctx.period_index.get(&ctx.table.periods[row]) {
                Some(&t) => t,
                None => {
                    return Err(Error::DomainError(format!(
                        "period {} not present in the fitted data",
                        ctx.table.periods[row]
                    )))
                }
            };
            let n_space = lat.n_nodes();
            Ok(point_of(ctx, row)?
                .and_then(|(x, y)| bilinear_weights(lat, x, y))
                .map(|w| {
                    w.into_iter()
                        .map(|(i, v)| (offset + t * n_space + i, v))
                        .collect()
                }))
        }
        ProjBinding::Svc { inner, weight } => {
            let w = ctx.table.covariate(weight)?[row];
            Ok(block_row_entries(inner, offset, row, ctx)?
                .map(|entries| entries.into_iter().map(|(i, v)| (i, v * w)).collect()))
        }
    }
}

/// Region index of a row; `None` marks a location without a region (out
/// of the areal domain).
fn region_of(ctx: &RowCtx, row: usize) -> Result<Option<usize>> {
    let site = &ctx.table.site_ids[row];
    let geom = ctx
        .geometry
        .ok_or_else(|| Error::InvalidModel("areal component needs site geometry".into()))?;
    match &geom.get(site)?.region {
        Some(label) => ctx
            .graph_labels
            .ok_or_else(|| Error::InvalidModel("areal component needs an adjacency graph".into()))?
            .get(label)
            .copied()
            .map(Some)
            .ok_or_else(|| Error::DomainError(format!("unknown region `{label}`"))),
        None => Ok(None),
    }
}

fn point_of(ctx: &RowCtx, row: usize) -> Result<Option<(f64, f64)>> {
    let site = &ctx.table.site_ids[row];
    let geom = ctx
        .geometry
        .ok_or_else(|| Error::InvalidModel("spatial component needs site geometry".into()))?;
    match geom.get(site)?.point {
        Some(xy) => Ok(Some(xy)),
        None => Err(Error::DomainError(format!(
            "site `{site}` has no coordinates but the component is continuous"
        ))),
    }
}

/// Bilinear interpolation weights of a point onto its four surrounding
/// lattice nodes; `None` when the point lies outside the lattice hull.
pub fn bilinear_weights(lat: &LatticeSpec, x: f64, y: f64) -> Option<Vec<(usize, f64)>> {
    let eps = 1e-9;
    let u = (x - lat.x0) / lat.spacing;
    let v = (y - lat.y0) / lat.spacing;
    if u < -eps || v < -eps || u > (lat.nx - 1) as f64 + eps || v > (lat.ny - 1) as f64 + eps {
        return None;
    }
    let ix = (u.floor() as i64).clamp(0, lat.nx as i64 - 2) as usize;
    let iy = (v.floor() as i64).clamp(0, lat.ny as i64 - 2) as usize;
    let fx = (u - ix as f64).clamp(0.0, 1.0);
    let fy = (v - iy as f64).clamp(0.0, 1.0);
    let node = |ax: usize, ay: usize| ay * lat.nx + ax;
    Some(vec![
        (node(ix, iy), (1.0 - fx) * (1.0 - fy)),
        (node(ix + 1, iy), fx * (1.0 - fy)),
        (node(ix, iy + 1), (1.0 - fx) * fy),
        (node(ix + 1, iy + 1), fx * fy),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_observations;
    use crate::data::ColumnSchema;

    fn table(body: &str) -> ObservationTable {
        read_observations(body.as_bytes(), &ColumnSchema::default()).unwrap()
    }

    #[test]
    fn ar1_independence_case() {
        let q = ar1_precision(4, 0.0, 2.5).unwrap();
        let d = q.to_dense();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 2.5 } else { 0.0 };
                assert!((d[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ar1_matches_dense_covariance_inverse() {
        // Derive the expected precision by inverting the dense stationary
        // covariance rho^|i-j| / tau.
        for (n, rho, tau) in [(3usize, 0.5, 1.0), (50, 0.9, 2.0)] {
            let q = ar1_precision(n, rho, tau).unwrap();
            let mut cov = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] = rho.powi((i as i32 - j as i32).abs()) / tau;
                }
            }
            let prod = q.to_dense() * cov;
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (prod[(i, j)] - expect).abs() < 1e-10,
                        "n={n} ({i},{j}): {}",
                        prod[(i, j)]
                    );
                }
            }
        }
        // Frozen 3x3 case: (1/0.75) * [[1,-0.5,0],[-0.5,1.25,-0.5],[0,-0.5,1]].
        let q = ar1_precision(3, 0.5, 1.0).unwrap().to_dense();
        let s = 1.0 / 0.75;
        let expect = [
            [s, -0.5 * s, 0.0],
            [-0.5 * s, 1.25 * s, -0.5 * s],
            [0.0, -0.5 * s, s],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ar1_rejects_unit_rho() {
        assert!(ar1_precision(5, 1.0, 1.0).is_err());
        assert!(ar1_precision(5, -1.2, 1.0).is_err());
    }

    #[test]
    fn rw1_structure_and_null_space() {
        let (q, cons) = rw_precision(1, 3, 1.0, false).unwrap();
        let d = q.to_dense();
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[(i, j)], expect[i][j]);
            }
        }
        assert_eq!(cons.len(), 1);
        // Q 1 = 0 exactly.
        for tau in [1.0, 0.5, 2.0] {
            let (q, _) = rw_precision(1, 6, tau, false).unwrap();
            let ones = vec![1.0; 6];
            let mut out = vec![0.0; 6];
            q.mul_vec(&ones, &mut out);
            assert!(out.iter().all(|&v| v == 0.0), "tau={tau}: {out:?}");
        }
    }

    #[test]
    fn rw2_rank_deficiency_is_two() {
        let q = rw_structure(2, 5).unwrap();
        let eig = nalgebra::SymmetricEigen::new(q.to_dense());
        let near_zero = eig.eigenvalues.iter().filter(|&&l| l.abs() < 1e-10).count();
        assert_eq!(near_zero, 2, "RW2 on 5 nodes must have rank 3");
        // Both constraint rows lie in the null space.
        for c in rw_constraints(2, 5) {
            let dense = c.to_dense(5);
            let mut out = vec![0.0; 5];
            q.mul_vec(&dense, &mut out);
            assert!(out.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn scaled_rw_has_unit_geometric_mean_variance() {
        let (q, _) = rw_precision(2, 12, 1.0, true).unwrap();
        let gm = intrinsic_geomean_variance(&q);
        assert!((gm - 1.0).abs() < 1e-8, "geometric mean {gm}");
    }

    #[test]
    fn besag_path_graph() {
        let g = AdjacencyGraph::new(
            vec!["0".into(), "1".into(), "2".into()],
            &[("0".into(), "1".into()), ("1".into(), "2".into())],
        )
        .unwrap();
        let (q, cons) = besag_precision(&g, 1.0).unwrap();
        let d = q.to_dense();
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[(i, j)], expect[i][j]);
            }
        }
        assert_eq!(cons.len(), 1);
        let ones = vec![1.0; 3];
        let mut out = vec![0.0; 3];
        q.mul_vec(&ones, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bym_is_block_diagonal_with_sum_projection() {
        let g = AdjacencyGraph::new(
            vec!["a".into(), "b".into()],
            &[("a".into(), "b".into())],
        )
        .unwrap();
        let (q, cons) = bym_precision(&g, 2.0, 3.0).unwrap();
        let d = q.to_dense();
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(0, 1)], -2.0);
        assert_eq!(d[(2, 2)], 3.0);
        assert_eq!(d[(2, 3)], 0.0);
        assert_eq!(cons.len(), 1);
        assert_eq!(cons[0].idx, vec![0, 1]);
    }

    #[test]
    fn matern_precision_matches_reference_stencil() {
        // Interior entries of the alpha=2 lattice stencil at unit spacing:
        // centre kappa^4 + 8 kappa^2 + 20, axis neighbour -2(kappa^2 + 4),
        // diagonal neighbour 2, two-step neighbour 1 (all times tau^2).
        let lat = LatticeSpec {
            nx: 7,
            ny: 7,
            x0: 0.0,
            y0: 0.0,
            spacing: 1.0,
        };
        let kappa = 1.3f64;
        let q = matern_lattice_precision(&lat, kappa, 1.0).unwrap();
        let d = q.to_dense();
        let c = 3 * 7 + 3; // centre node
        let k2 = kappa * kappa;
        assert!((d[(c, c)] - (k2 * k2 + 8.0 * k2 + 20.0)).abs() < 1e-12);
        assert!((d[(c, c + 1)] + 2.0 * (k2 + 4.0)).abs() < 1e-12);
        assert!((d[(c, c + 8)] - 2.0).abs() < 1e-12);
        assert!((d[(c, c + 2)] - 1.0).abs() < 1e-12);
        assert!(q.factorize().is_ok(), "Matern precision must be SPD");
    }

    #[test]
    fn spacetime_kronecker_against_direct_construction() {
        let lat = LatticeSpec {
            nx: 4,
            ny: 4,
            x0: 0.0,
            y0: 0.0,
            spacing: 1.0,
        };
        let qs = matern_lattice_precision(&lat, 0.8, 1.0).unwrap();
        let rho = 0.6;
        let qst = spacetime_precision(&qs, 3, rho).unwrap();
        let qt = ar1_precision(3, rho, 1.0).unwrap().to_dense();
        let qsd = qs.to_dense();
        let dense = qst.to_dense();
        let ns = 16;
        for ti in 0..3 {
            for tj in 0..3 {
                for si in 0..ns {
                    for sj in 0..ns {
                        let expect = qt[(ti, tj)] * qsd[(si, sj)];
                        let got = dense[(ti * ns + si, tj * ns + sj)];
                        assert!(
                            (got - expect).abs() < 1e-12,
                            "({ti},{si}) x ({tj},{sj})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn spacetime_edge_cases() {
        let lat = LatticeSpec {
            nx: 4,
            ny: 4,
            x0: 0.0,
            y0: 0.0,
            spacing: 1.0,
        };
        let qs = matern_lattice_precision(&lat, 1.0, 1.0).unwrap();
        // Single period: Q_st = Q_space.
        let q1 = spacetime_precision(&qs, 1, 0.7).unwrap();
        assert_eq!(q1.to_dense(), qs.to_dense());
        // rho = 0: block-diagonal replication.
        let q0 = spacetime_precision(&qs, 2, 0.0).unwrap();
        let d = q0.to_dense();
        let qsd = qs.to_dense();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(d[(i, j)], qsd[(i, j)]);
                assert_eq!(d[(16 + i, 16 + j)], qsd[(i, j)]);
                assert_eq!(d[(i, 16 + j)], 0.0);
            }
        }
    }

    #[test]
    fn bilinear_weights_sum_to_one_and_flag_outside() {
        let lat = LatticeSpec {
            nx: 5,
            ny: 4,
            x0: 1.0,
            y0: 2.0,
            spacing: 0.5,
        };
        let w = bilinear_weights(&lat, 1.8, 2.7).unwrap();
        let sum: f64 = w.iter().map(|&(_, v)| v).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(bilinear_weights(&lat, 0.0, 2.5).is_none());
        assert!(bilinear_weights(&lat, 3.2, 2.5).is_none());
        // Exactly on a node.
        let w = bilinear_weights(&lat, 1.5, 2.5).unwrap();
        let nonzero: Vec<_> = w.iter().filter(|&&(_, v)| v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(*nonzero[0], (1 * 5 + 1, 1.0));
    }

    #[test]
    fn intercept_only_assembly() {
        let t = table("site,period,y,K\na,1,1,2\nb,1,0,2\nc,1,2,2\nd,1,1,2\ne,1,0,2\n");
        let spec = ModelSpec {
            orientation: crate::likelihood::Orientation::Occupancy,
            link: crate::links::Link::Logit,
            components: vec![ComponentDef {
                name: "intercept".into(),
                kind: ComponentKind::Intercept,
                priors: ComponentPriors::default(),
                sum_to_zero: false,
                fixed_prior_precision: None,
            }],
            detection: HyperProbModel {
                fixed: Some(vec![0.0]),
                ..Default::default()
            },
        };
        let bound = BoundModel::bind(&spec, &t, None, None).unwrap();
        assert_eq!(bound.n_latent, 1);
        let q = bound.precision(&[]).to_dense();
        assert_eq!(q[(0, 0)], 0.001);
        for r in 0..5 {
            let row: Vec<_> = bound.projector.row(r).collect();
            assert_eq!(row, vec![(0, 1.0)]);
        }
    }

    #[test]
    fn model1_latent_dimension_bookkeeping() {
        // Intercept + RW(elev) + AR1(year) + IID(site):
        // latent dim = bins + n_years + n_sites + 1.
        let mut body = String::from("site,period,y,K,elev\n");
        for s in 0..6 {
            for t in 0..3 {
                body.push_str(&format!("s{s},{t},1,2,{}\n", s as f64 * 0.3));
            }
        }
        let t = table(&body);
        let spec = ModelSpec {
            orientation: crate::likelihood::Orientation::Occupancy,
            link: crate::links::Link::Logit,
            components: vec![
                ComponentDef {
                    name: "intercept".into(),
                    kind: ComponentKind::Intercept,
                    priors: ComponentPriors::default(),
                    sum_to_zero: false,
                    fixed_prior_precision: None,
                },
                ComponentDef {
                    name: "elev".into(),
                    kind: ComponentKind::RandomWalk {
                        covariate: "elev".into(),
                        order: 2,
                        bins: 5,
                        scaled: true,
                    },
                    priors: ComponentPriors::default(),
                    sum_to_zero: false,
                    fixed_prior_precision: None,
                },
                ComponentDef {
                    name: "year".into(),
                    kind: ComponentKind::Ar1,
                    priors: ComponentPriors::default(),
                    sum_to_zero: false,
                    fixed_prior_precision: None,
                },
                ComponentDef {
                    name: "space".into(),
                    kind: ComponentKind::Iid {
                        group: GroupBy::Site,
                    },
                    priors: ComponentPriors::default(),
                    sum_to_zero: false,
                    fixed_prior_precision: None,
                },
            ],
            detection: HyperProbModel {
                fixed: Some(vec![0.0]),
                ..Default::default()
            },
        };
        let bound = BoundModel::bind(&spec, &t, None, None).unwrap();
        assert_eq!(bound.n_latent, 1 + 5 + 3 + 6);
        // Hyperparameters: rw tau, ar1 (tau, rho), iid tau.
        assert_eq!(bound.hyper.dim(), 4);
        // RW2 carries two constraint rows.
        assert_eq!(bound.constraints.len(), 2);
        // Q is exactly symmetric by construction and refills are
        // bit-identical for identical theta.
        let theta = bound.hyper.init();
        let q1 = bound.precision(&theta);
        let q2 = bound.precision(&theta);
        assert_eq!(q1, q2);
    }

    #[test]
    fn svc_rows_scale_by_weight_covariate() {
        let mut body = String::from("site,period,y,K,t\n");
        let mut geom = SiteGeometry::default();
        for s in 0..4 {
            for t in 0..3 {
                body.push_str(&format!("s{s},{t},1,2,{}\n", t as f64));
            }
            geom.sites.insert(
                format!("s{s}"),
                crate::data::SiteInfo::at(1.0 + s as f64, 1.5),
            );
        }
        let t = table(&body);
        let lat = LatticeSpec {
            nx: 6,
            ny: 6,
            x0: 0.0,
            y0: 0.0,
            spacing: 1.0,
        };
        let spec = ModelSpec {
            orientation: crate::likelihood::Orientation::Occupancy,
            link: crate::links::Link::Logit,
            components: vec![ComponentDef {
                name: "trend".into(),
                kind: ComponentKind::Svc {
                    base: SvcBase::Matern { lattice: lat },
                    weight: "t".into(),
                },
                priors: ComponentPriors::default(),
                sum_to_zero: false,
                fixed_prior_precision: None,
            }],
            detection: HyperProbModel {
                fixed: Some(vec![0.0]),
                ..Default::default()
            },
        };
        let bound = BoundModel::bind(&spec, &t, Some(&geom), None).unwrap();
        // Row for (s0, t=2): weights are bilinear weights times 2.
        let row2: Vec<_> = bound.projector.row(2).collect();
        let base = bilinear_weights(&lat, 1.0, 1.5).unwrap();
        let expect: Vec<_> = base.iter().map(|&(i, w)| (i, w * 2.0)).collect();
        let expect: Vec<_> = expect.into_iter().filter(|&(_, w)| true).collect();
        let mut sorted = expect.clone();
        sorted.sort_by_key(|&(i, _)| i);
        assert_eq!(row2, sorted);
        // Row for t=0 has zero weights (trend multiplied by 0).
        let row0: Vec<_> = bound.projector.row(0).collect();
        assert!(row0.iter().all(|&(_, w)| w == 0.0));
    }
}
