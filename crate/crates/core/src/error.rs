use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("binary covariate column {col} has value {value} at row {row}")]
    BinaryViolation { col: usize, row: usize, value: f64 },

    #[error("continuous covariate column {col} has zero variance")]
    DegenerateColumn { col: usize },

    #[error("residual degrees of freedom {dof} is not positive")]
    DegenerateDoF { dof: i64 },

    #[error("residual sum of squares is zero")]
    ZeroVariance,

    #[error("solver produced a non-finite objective after {iters} outer iterations")]
    SolverDiverged { iters: usize },

    #[error("precision matrix is singular even after adding ridge {ridge}")]
    SingularAfterRidge { ridge: f64 },

    #[error("cannot split {n} observations into {folds} folds")]
    FoldTooSmall { n: usize, folds: usize },

    #[error("coefficient matrix Gamma is all zero after resampling")]
    AllZeroGamma,

    #[error("precision matrix of subject {subject} is not positive definite after {attempts} repairs")]
    NonPdOmega { subject: usize, attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("node {node}: {source}")]
    Node {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_node(self, node: usize) -> Error {
        match self {
            Error::Node { .. } => self,
            other => Error::Node {
                node,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping node annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Node { source, .. } => source.root(),
            other => other,
        }
    }
}
