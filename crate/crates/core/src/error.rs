use thiserror::Error;

use crate::grad::ParamTree;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure{}: {detail}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Numerical { node: Option<usize>, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Training hit a numerical failure; the last finite parameters are kept.
    #[error("training aborted at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        last_good: Box<ParamTree>,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Diverged { .. } | Error::Convergence { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
