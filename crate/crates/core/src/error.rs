//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DekfError>;

#[derive(Debug, Error)]
pub enum DekfError {
    /// A matrix required to be (semi-)definite failed factorization even
    /// after jitter escalation.
    #[error("matrix not positive definite: {0}")]
    NonPositiveDefinite(String),

    /// Family/link pair whose implied mean range is inconsistent.
    #[error("link {link} is incompatible with family {family}")]
    IncompatibleLink { family: String, link: String },

    /// A natural parameter left the numerically representable range.
    #[error("numeric overflow: {0}")]
    Overflow(String),

    /// Observation outside the family's support.
    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Tensor context listed the same mode namespace more than once.
    #[error("duplicate mode namespace {0} in tensor context")]
    DuplicateMode(String),

    /// Factorization-machine interaction order outside the supported range.
    #[error("unsupported interaction order {0}")]
    OrderUnsupported(usize),

    /// An update or predict was requested at a time before an entity's clock.
    #[error("time travel for entity {entity}: last_t={last_t}, requested t={t}")]
    TimeTravel { entity: String, last_t: u64, t: u64 },

    /// The innovation system I + AD could not be solved.
    #[error("singular innovation system in update")]
    SingularInnovation,

    /// No backtracking step increased the iterated-update objective.
    #[error("line search failed: no step size increases the MAP objective")]
    LineSearchFailed,

    /// Simulation asked for ground truth that was never generated.
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
}

impl DekfError {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            DekfError::ConfigError(_)
            | DekfError::IncompatibleLink { .. }
            | DekfError::DimensionMismatch(_)
            | DekfError::DuplicateMode(_)
            | DekfError::OrderUnsupported(_)
            | DekfError::MissingGroundTruth(_) => 2,
            DekfError::IoError(_) => 3,
            DekfError::NonPositiveDefinite(_)
            | DekfError::Overflow(_)
            | DekfError::InvalidObservation(_)
            | DekfError::TimeTravel { .. }
            | DekfError::SingularInnovation
            | DekfError::LineSearchFailed => 4,
        }
    }
}
