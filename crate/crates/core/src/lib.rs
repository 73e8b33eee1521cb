//! Edge-edit influence estimation for graph convolutional networks.
//!
//! Predicts how deleting or inserting a single edge changes a trained GCN's
//! validation loss, Dirichlet energy or over-squashing measure, splitting
//! the prediction into a parameter-shift term and a message-propagation
//! term, and checks predictions against a fine-tuning or retraining oracle.

pub mod apps;
pub mod diff;
pub mod graph;
pub mod influence;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod report;
pub mod train;

use std::path::Path;

use thiserror::Error;

pub use diff::DiffError;
pub use graph::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty {0} mask")]
    EmptyMask(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("edit list row {row}: {reason}")]
    EditRow { row: usize, reason: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
