use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("channel {channel} out of range for field with {channels} channels")]
    ChannelOutOfRange { channel: usize, channels: usize },

    #[error("unknown stencil tag `{0}`")]
    UnknownStencil(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layout does not match system: {0}")]
    Layout(String),

    #[error("boundary rule incompatible with system: {0}")]
    Boundary(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular operator: {0}")]
    Singular(String),

    #[error("coefficient must be strictly positive: {0}")]
    NonPositiveCoefficient(String),

    #[error("unstable time step: {0}")]
    Unstable(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("requested {requested} observations but grid has only {available} cells")]
    TooManyObservations { requested: usize, available: usize },

    #[error("invalid prior: {0}")]
    Prior(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("TDS weighting requires a point-evaluable proposal density")]
    NonEvaluableProposal,

    #[error("all particle weights are zero")]
    DegenerateWeights,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the failure came from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::Singular(_)
                | Error::Unstable(_)
                | Error::NonFinite(_)
                | Error::DegenerateWeights
        )
    }
}
