//! Run configuration: a single JSON document shared by every subcommand,
//! schema-validated before any computation. Unknown keys are rejected.

use occulgm_core::inference::{ExploreOptions, InnerOptions, Strategy};
use occulgm_core::model::ModelSpec;
use occulgm_core::predict::{SimLayout, SimTruthParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub geometry: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            geometry: None,
            adjacency: None,
            output: default_output(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPrep {
    /// Covariates standardized to zero mean and unit sd at load time.
    #[serde(default)]
    pub standardize: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    #[serde(default = "default_log_drop")]
    pub log_drop: f64,
    #[serde(default = "default_ccd_f0")]
    pub ccd_f0: f64,
    #[serde(default = "default_hess_step")]
    pub hess_step: f64,
}

fn default_strategy() -> Strategy {
    Strategy::Auto
}
fn default_seed() -> u64 {
    1
}
fn default_threads() -> usize {
    1
}
fn default_max_iter() -> usize {
    100
}
fn default_grid_step() -> f64 {
    0.75
}
fn default_log_drop() -> f64 {
    2.5
}
fn default_ccd_f0() -> f64 {
    1.1
}
fn default_hess_step() -> f64 {
    0.01
}

impl Default for InferenceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl InferenceConfig {
    pub fn explore_options(&self) -> ExploreOptions {
        ExploreOptions {
            strategy: self.strategy,
            grid_step: self.grid_step,
            log_drop: self.log_drop,
            ccd_f0: self.ccd_f0,
            hess_step: self.hess_step,
            inner: InnerOptions {
                max_iter: self.max_iter,
                ..InnerOptions::default()
            },
            ..ExploreOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Waic,
    Dic,
    Mlik,
    Lgocv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_scores")]
    pub scores: Vec<ScoreKind>,
    #[serde(default = "default_level_sets")]
    pub num_level_sets: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Report the LGOCV criterion on the log scale (the density-scale
    /// variant is kept for completeness).
    #[serde(default = "default_true")]
    pub log_scores: bool,
}

fn default_scores() -> Vec<ScoreKind> {
    vec![ScoreKind::Waic, ScoreKind::Dic, ScoreKind::Mlik, ScoreKind::Lgocv]
}
fn default_level_sets() -> usize {
    3
}
fn default_n_samples() -> usize {
    1000
}
fn default_true() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub layout: SimLayout,
    pub truth: SimTruthParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictTarget {
    /// The fitted observation rows themselves.
    Sites,
    /// All lattice nodes of a named spatial component.
    Lattice,
    /// A caller-provided prediction table (same CSV schema as data).
    Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub at: PredictTarget,
    /// Lattice target: which spatial component supplies the cells.
    pub component: Option<String>,
    /// Table target: path of the prediction table CSV.
    pub table: Option<PathBuf>,
    /// Periods to predict (defaults to every fitted period).
    pub periods: Option<Vec<i64>>,
    pub n_samples: Option<usize>,
    /// Space-varying coefficient component to label for significance.
    pub svc: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    pub model: ModelSpec,
    #[serde(default)]
    pub data_prep: DataPrep,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub simulate: Option<SimulateConfig>,
    pub predict: Option<PredictConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            format!(
                "config `{}` line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            )
        })?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Hash over everything that determines fit artifacts. Thread count
    /// and output paths are excluded: they must not change results.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct HashView<'a> {
            model: &'a ModelSpec,
            data_prep: &'a DataPrep,
            strategy: Strategy,
            seed: u64,
            max_iter: usize,
            grid_step: f64,
            log_drop: f64,
            ccd_f0: f64,
            hess_step: f64,
            simulate: &'a Option<SimulateConfig>,
            data: &'a Option<PathBuf>,
            geometry: &'a Option<PathBuf>,
            adjacency: &'a Option<PathBuf>,
        }
        let view = HashView {
            model: &self.model,
            data_prep: &self.data_prep,
            strategy: self.inference.strategy,
            seed: self.inference.seed,
            max_iter: self.inference.max_iter,
            grid_step: self.inference.grid_step,
            log_drop: self.inference.log_drop,
            ccd_f0: self.inference.ccd_f0,
            hess_step: self.inference.hess_step,
            simulate: &self.simulate,
            data: &self.paths.data,
            geometry: &self.paths.geometry,
            adjacency: &self.paths.adjacency,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex::encode(hasher.finalize())
    }
}
