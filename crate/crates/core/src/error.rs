use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("polar projection did not converge in {iterations} iterations (defect {defect:e})")]
    PolarNotConverged { iterations: usize, defect: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("fixed-point inversion did not converge in {iterations} iterations (residual {residual:e})")]
    InversionNotConverged { iterations: usize, residual: f64 },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gamma {gamma} violates the invertibility bound {bound} for {layers} prox layers")]
    GammaBound {
        gamma: f64,
        bound: f64,
        layers: usize,
    },

    #[error("non-finite value in block {block}")]
    NonFinite { block: usize },

    #[error("non-finite loss {loss} (batch of {batch} samples)")]
    NonFiniteLoss { loss: f64, batch: usize },

    #[error("dimension {dim} exceeds the exact Jacobian guard of {limit}; use the stochastic estimator")]
    JacobianGuard { dim: usize, limit: usize },

    #[error("activation normalization is not initialized")]
    ActNormUninitialized,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::AtSample {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::PolarNotConverged { .. }
            | Error::Singular
            | Error::NotPositiveDefinite
            | Error::InversionNotConverged { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. } => true,
            Error::AtSample { source, .. } | Error::AtStep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
