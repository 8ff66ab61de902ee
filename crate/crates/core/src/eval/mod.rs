//! Metrics, model evaluation, baselines and report emission.

pub mod baselines;
mod metrics;
mod model_eval;
pub mod report;

pub use metrics::{
    correlation_report, horizon_mse, off_diagonal, pearson, pearson_offdiag, permutation_score, CorrelationReport,
    Histogram, HorizonMse, MetricError, PermutationScore, MAX_PERMUTATION_CATEGORIES, STANDARD_HORIZONS,
};
pub use model_eval::{evaluate, parallel_map, EvalOptions, Evaluation, GraphSource};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("data error: {0}")]
    Data(String),
}

impl From<crate::autodiff::AutodiffError> for EvalError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        EvalError::Model(e.into())
    }
}
