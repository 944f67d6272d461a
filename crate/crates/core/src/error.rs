use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which nuisance regression a fit error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    TreatmentPropensity,
    CensoringPropensity,
    OutcomeRegression,
    IntermediateRegression,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::TreatmentPropensity => "g_A",
            ModelKind::CensoringPropensity => "g_Delta",
            ModelKind::OutcomeRegression => "Q_Y",
            ModelKind::IntermediateRegression => "Q_int",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Outcome,
    Intermediate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Outcome => f.write_str("stage 1"),
            Stage::Intermediate => f.write_str("stage 2"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("design matrix is rank deficient (pivot {pivot} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("logistic fit separated: coefficient {column} reached {value}")]
    Separation { column: usize, value: f64 },

    #[error("iteration did not converge after {iterations} steps (max |score| {score})")]
    NoConvergence { iterations: usize, score: f64 },

    #[error("fluctuation score derivative {curvature} is degenerate")]
    DegenerateCurvature { curvature: f64 },

    #[error("cannot build {folds} folds from {clusters} clusters")]
    TooFewClusters { folds: usize, clusters: usize },

    #[error("could not deal folds with both treatment arms and censoring classes in every training set")]
    UnbalancedFolds,

    #[error("outcome range is degenerate (all values equal {value})")]
    DegenerateRange { value: f64 },

    #[error("{model} fit failed on fold {fold}: {source}")]
    NuisanceFit {
        fold: usize,
        model: ModelKind,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} has an empty fluctuation cell (arm {arm}, fold {fold})")]
    EmptyCell { stage: Stage, arm: u8, fold: usize },

    #[error("{stage} score equation violated (arm {arm}, fold {fold}): residual {residual:e}")]
    ScoreEquation {
        stage: Stage,
        arm: u8,
        fold: usize,
        residual: f64,
    },

    #[error("need at least {needed} clusters, got {clusters}")]
    DegenerateClusters { needed: usize, clusters: usize },

    #[error("{failed} of {total} leave-one-cluster-out refits failed (first: {first})")]
    Jackknife {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}
