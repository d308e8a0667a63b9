use thiserror::Error;

/// Errors raised anywhere in the MAtt pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MattError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error(
        "eigensolver did not converge after {sweeps} sweeps (dim {dim}, off-diagonal norm {off_norm:e}, frobenius norm {frobenius:e})"
    )]
    SpectralFailure {
        dim: usize,
        sweeps: usize,
        off_norm: f64,
        frobenius: f64,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is rank deficient (pivot {pivot:e} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid weights: {0}")]
    Weight(String),

    #[error("did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("content error: {0}")]
    Content(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MattError>,
    },
}

impl From<std::io::Error> for MattError {
    fn from(err: std::io::Error) -> Self {
        MattError::Io(err.to_string())
    }
}

impl MattError {
    /// Strip any stage annotations and return the underlying error.
    pub fn root(&self) -> &MattError {
        match self {
            MattError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MattError>;

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            already @ MattError::Stage { .. } => already,
            other => MattError::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
