//! Declarative model specification: latent components, hyperparameter
//! transforms and priors, and the detection-side probability model.
//!
//! A `ModelSpec` is pure configuration; binding it to data (see
//! `components`) resolves covariates, site maps and sparsity patterns.

use crate::error::{Error, Result};
use crate::likelihood::Orientation;
use crate::links::Link;
use serde::{Deserialize, Serialize};

/// Scale on which a hyperparameter is explored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// t = log tau for a precision tau.
    LogPrecision,
    /// t = log sigma for a standard deviation; tau = exp(-2 t).
    LogStdev,
    /// t = log kappa for the Matern scale.
    LogScale,
    /// rho = 2 expit(t) - 1 for a lag-one correlation.
    FisherRho,
    /// Untransformed (detection coefficients).
    Identity,
}

impl Transform {
    pub fn to_natural(self, t: f64) -> f64 {
        match self {
            Transform::LogPrecision | Transform::LogStdev | Transform::LogScale => t.exp(),
            Transform::FisherRho => 2.0 / (1.0 + (-t).exp()) - 1.0,
            Transform::Identity => t,
        }
    }

    pub fn from_natural(self, v: f64) -> f64 {
        match self {
            Transform::LogPrecision | Transform::LogStdev | Transform::LogScale => v.ln(),
            Transform::FisherRho => {
                let u = (v + 1.0) / 2.0;
                (u / (1.0 - u)).ln()
            }
            Transform::Identity => v,
        }
    }

    /// The precision tau implied by the entry value, for entries that
    /// parameterize one.
    pub fn precision_value(self, t: f64) -> f64 {
        match self {
            Transform::LogPrecision => t.exp(),
            Transform::LogStdev => (-2.0 * t).exp(),
            _ => panic!("entry does not parameterize a precision"),
        }
    }
}

/// Prior distribution for one hyperparameter, evaluated on the transformed
/// scale (Jacobians included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorDist {
    /// Gaussian on the transformed scale.
    Gaussian { mean: f64, precision: f64 },
    /// Penalized-complexity prior on a precision: exponential on
    /// sigma = tau^-1/2 with rate lambda = -ln(alpha) / u, i.e.
    /// P(sigma > u) = alpha.
    PcPrecision { u: f64, alpha: f64 },
}

impl PriorDist {
    pub fn log_density(&self, transform: Transform, t: f64) -> f64 {
        match *self {
            PriorDist::Gaussian { mean, precision } => {
                -0.5 * precision * (t - mean) * (t - mean)
                    + 0.5 * (precision.ln() - (2.0 * std::f64::consts::PI).ln())
            }
            PriorDist::PcPrecision { u, alpha } => {
                let lambda = -alpha.ln() / u;
                // sigma as a function of t, with |d sigma / d t|.
                let (sigma, log_jac) = match transform {
                    Transform::LogPrecision => {
                        let s = (-0.5 * t).exp();
                        (s, s.ln() - 2.0f64.ln())
                    }
                    Transform::LogStdev => {
                        let s = t.exp();
                        (s, s.ln())
                    }
                    _ => panic!("PC precision prior on a non-precision entry"),
                };
                lambda.ln() - lambda * sigma + log_jac
            }
        }
    }
}

/// One hyperparameter slot of the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperEntry {
    pub name: String,
    pub transform: Transform,
    pub prior: PriorDist,
    /// Starting value on the transformed scale.
    pub init: f64,
}

/// The ordered hyperparameter schema; values live in plain `Vec<f64>`s on
/// the transformed scale.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HyperSpec {
    pub entries: Vec<HyperEntry>,
}

impl HyperSpec {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn init(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.init).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::InvalidModel(format!("no hyperparameter named `{name}`")))
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        self.entries
            .iter()
            .zip(theta)
            .map(|(e, &t)| e.prior.log_density(e.transform, t))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.clone()) {
                return Err(Error::InvalidModel(format!(
                    "duplicate hyperparameter name `{}`",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

/// Regular lattice carrying a Matern field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub y0: f64,
    pub spacing: f64,
}

impl LatticeSpec {
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }
}

/// Grouping variable for IID effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Site,
    Period,
}

/// Spatial carrier of a space-varying coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvcBase {
    Matern { lattice: LatticeSpec },
    Bym,
}

/// The latent component menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ComponentKind {
    /// Global intercept (fixed effect).
    Intercept,
    /// Linear fixed effect of a covariate.
    Linear { covariate: String },
    /// Exchangeable effects per site or period.
    Iid { group: GroupBy },
    /// Stationary AR1 over periods.
    Ar1,
    /// Random-walk smooth over covariate bins.
    RandomWalk {
        covariate: String,
        #[serde(default = "default_rw_order")]
        order: u8,
        #[serde(default = "default_rw_bins")]
        bins: usize,
        #[serde(default = "default_true")]
        scaled: bool,
    },
    /// Intrinsic CAR over the adjacency graph.
    Besag,
    /// Besag plus IID heterogeneity (u + v), projected as the sum.
    Bym,
    /// Matern field on a regular lattice (SPDE discretization).
    Matern { lattice: LatticeSpec },
    /// AR1-in-time dynamics with spatially correlated innovations.
    SpaceTime {
        lattice: LatticeSpec,
        n_periods: Option<usize>,
    },
    /// Space-varying coefficient: a spatial field multiplied by a
    /// covariate weight in the projector.
    Svc { base: SvcBase, weight: String },
}

fn default_rw_order() -> u8 {
    2
}
fn default_rw_bins() -> usize {
    25
}
fn default_true() -> bool {
    true
}

/// Hyperparameter settings attached to a component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentPriors {
    /// Prior for the (marginal) precision; PC(u=1, alpha=0.01) by default.
    pub precision: Option<PriorDist>,
    /// Explore the precision as log sigma instead of log tau.
    #[serde(default)]
    pub precision_as_stdev: bool,
    pub precision_init: Option<f64>,
    /// Second precision (BYM iid part).
    pub precision2: Option<PriorDist>,
    pub precision2_init: Option<f64>,
    /// Lag-one correlation prior (AR1 / space-time).
    pub rho: Option<PriorDist>,
    pub rho_init: Option<f64>,
    /// Matern scale prior on log kappa.
    pub kappa: Option<PriorDist>,
    pub kappa_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: ComponentKind,
    #[serde(default)]
    pub priors: ComponentPriors,
    /// Extra sum-to-zero constraint for proper components (intrinsic
    /// components always carry their null-space constraints).
    #[serde(default)]
    pub sum_to_zero: bool,
    /// Prior precision for fixed effects (intercept / linear).
    pub fixed_prior_precision: Option<f64>,
}

// serde cannot combine deny_unknown_fields with a flattened internally
// tagged enum, so strict key checking is done by hand: the outer fields
// are split off and the rest must be exactly the variant's fields.
impl<'de> Deserialize<'de> for ComponentDef {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let mut map = serde_json::Map::deserialize(deserializer)?;
        let name = match map.remove("name") {
            Some(serde_json::Value::String(s)) => s,
            _ => return Err(D::Error::custom("component needs a string `name`")),
        };
        let priors = match map.remove("priors") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => ComponentPriors::default(),
        };
        let sum_to_zero = match map.remove("sum_to_zero") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => false,
        };
        let fixed_prior_precision = match map.remove("fixed_prior_precision") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => None,
        };
        let kind: ComponentKind =
            serde_json::from_value(serde_json::Value::Object(map.clone())).map_err(|e| {
                D::Error::custom(format!("component `{name}`: {e}"))
            })?;
        let allowed: &[&str] = match &kind {
            ComponentKind::Intercept | ComponentKind::Ar1 | ComponentKind::Besag
            | ComponentKind::Bym => &[],
            ComponentKind::Linear { .. } => &["covariate"],
            ComponentKind::Iid { .. } => &["group"],
            ComponentKind::RandomWalk { .. } => &["covariate", "order", "bins", "scaled"],
            ComponentKind::Matern { .. } => &["lattice"],
            ComponentKind::SpaceTime { .. } => &["lattice", "n_periods"],
            ComponentKind::Svc { .. } => &["base", "weight"],
        };
        for key in map.keys() {
            if key != "type" && !allowed.contains(&key.as_str()) {
                return Err(D::Error::custom(format!(
                    "component `{name}`: unknown field `{key}`"
                )));
            }
        }
        Ok(ComponentDef {
            name,
            kind,
            priors,
            sum_to_zero,
            fixed_prior_precision,
        })
    }
}

impl ComponentDef {
    pub fn new(name: &str, kind: ComponentKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            priors: ComponentPriors::default(),
            sum_to_zero: false,
            fixed_prior_precision: None,
        }
    }
}

/// The probability handled on the hyperparameter side: a link-linear
/// function of row covariates with at most five coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperProbModel {
    #[serde(default = "default_logit")]
    pub link: Link,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Known coefficients; when present nothing is inferred on this side.
    pub fixed: Option<Vec<f64>>,
    /// Gaussian prior for each coefficient on the identity scale.
    pub prior: Option<PriorDist>,
    pub init: Option<Vec<f64>>,
}

fn default_logit() -> Link {
    Link::Logit
}

impl Default for HyperProbModel {
    fn default() -> Self {
        Self {
            link: Link::Logit,
            covariates: Vec::new(),
            fixed: None,
            prior: None,
            init: None,
        }
    }
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Which probability the latent predictor drives.
    #[serde(default = "default_orientation")]
    pub orientation: Orientation,
    /// Link for the predictor-driven probability.
    #[serde(default = "default_logit")]
    pub link: Link,
    pub components: Vec<ComponentDef>,
    /// Model for the other probability (detection under the default
    /// orientation).
    #[serde(default)]
    pub detection: HyperProbModel,
}

fn default_orientation() -> Orientation {
    Orientation::Occupancy
}

pub const MAX_DETECTION_COEFS: usize = 5;
pub const MAX_GRID_DIM: usize = 10;
pub const DEFAULT_FIXED_PRIOR_PRECISION: f64 = 0.001;
pub const DEFAULT_ALPHA_PRIOR: PriorDist = PriorDist::Gaussian {
    mean: 0.0,
    precision: 0.001,
};
pub const DEFAULT_PC_PRECISION: PriorDist = PriorDist::PcPrecision {
    u: 1.0,
    alpha: 0.01,
};
pub const DEFAULT_RHO_PRIOR: PriorDist = PriorDist::Gaussian {
    mean: 0.0,
    precision: 0.15,
};

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidModel("no latent components".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.components {
            if !names.insert(c.name.clone()) {
                return Err(Error::InvalidModel(format!(
                    "duplicate component name `{}`",
                    c.name
                )));
            }
        }
        if self.detection.fixed.is_none()
            && self.detection.covariates.len() + 1 > MAX_DETECTION_COEFS
        {
            return Err(Error::InvalidModel(format!(
                "at most {MAX_DETECTION_COEFS} detection coefficients supported"
            )));
        }
        if let Some(fixed) = &self.detection.fixed {
            if fixed.len() != self.detection.covariates.len() + 1 {
                return Err(Error::InvalidModel(
                    "fixed detection coefficients must be intercept + one per covariate".into(),
                ));
            }
        }
        Ok(())
    }
}
