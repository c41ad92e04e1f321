//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by data ingestion, model assembly and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("column `{column}` row {row}: value `{value}` is not numeric")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("row {row}: y = {y} exceeds number of visits K = {k}")]
    YExceedsK { row: usize, y: u32, k: u32 },
    #[error("row {row}: K = 0 (every row needs at least one visit)")]
    ZeroVisits { row: usize },
    #[error("duplicate (site, period) pair ({site}, {period})")]
    DuplicateSitePeriod { site: String, period: i64 },
    #[error("covariate `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("site `{0}` has no geometry entry")]
    UnmappedSite(String),
    #[error("adjacency graph is empty")]
    EmptyGraph,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("component `{0}` not found in the fitted model")]
    ComponentNotFound(String),
    #[error("inner optimizer failed to converge after {iterations} iterations (objective {objective})")]
    NonConvergence { iterations: usize, objective: f64 },
    #[error("hyperparameter optimization failed: {0}")]
    OptimFailure(String),
    #[error("matrix not positive definite at pivot {0}")]
    NotPositiveDefinite(usize),
    #[error("oracle dimension {0} too large (limit {1})")]
    DimensionTooLarge(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, Error>;
