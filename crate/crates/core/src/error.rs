use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SssdError>;

/// Coarse error category. Drives CLI exit codes and HTTP error bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Configuration,
    UnattainableDesign,
    Degeneracy,
    SmallSample,
    Numerical,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Configuration => "configuration",
            ErrorCode::UnattainableDesign => "unattainable_design",
            ErrorCode::Degeneracy => "degeneracy",
            ErrorCode::SmallSample => "small_sample",
            ErrorCode::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum SssdError {
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("maximum likelihood estimate on the boundary: {0}")]
    BoundaryMle(String),

    #[error("unattainable design: {0}")]
    Unattainable(String),

    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("non-finite gradient of the comparison map: {0}")]
    Characteristic(String),

    #[error("sample size too small for asymptotic design: {0}")]
    SmallSample(String),

    #[error("expected HDI length is flat in n: {0}")]
    FlatLength(String),

    #[error("fitted length line has non-positive slope: {0}")]
    Monotonicity(String),

    #[error("posterior mode search did not converge: {0}")]
    Optimization(String),

    #[error("negative Hessian at the posterior mode is not positive definite: {0}")]
    Curvature(String),

    #[error("too many Laplace failures: {0}")]
    Instability(String),

    #[error("importance weights degenerate: {0}")]
    ProposalMismatch(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("line {line}: {inner}")]
    AtLine { line: u8, inner: Box<SssdError> },
}

impl SssdError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SssdError::Config { field: field.into(), message: message.into() }
    }

    /// Tag an error with the Algorithm-2 line it came from. Already tagged errors keep their line.
    pub fn at_line(self, line: u8) -> Self {
        match self {
            e @ SssdError::AtLine { .. } => e,
            other => SssdError::AtLine { line, inner: Box::new(other) },
        }
    }

    pub fn line(&self) -> Option<u8> {
        match self {
            SssdError::AtLine { line, .. } => Some(*line),
            _ => None,
        }
    }

    /// Innermost error with any line tags stripped.
    pub fn root(&self) -> &SssdError {
        match self {
            SssdError::AtLine { inner, .. } => inner.root(),
            e => e,
        }
    }

    pub fn code(&self) -> ErrorCode {
        match self.root() {
            SssdError::Config { .. } | SssdError::Domain(_) | SssdError::Capability(_) => ErrorCode::Configuration,
            SssdError::Unattainable(_) => ErrorCode::UnattainableDesign,
            SssdError::Degenerate(_)
            | SssdError::DegenerateSample(_)
            | SssdError::BoundaryMle(_)
            | SssdError::Characteristic(_) => ErrorCode::Degeneracy,
            SssdError::SmallSample(_) => ErrorCode::SmallSample,
            _ => ErrorCode::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    Degeneracy,
    Censoring,
    SmallSample,
    ExtremeCalibration,
    Extrapolation,
    LengthExceedsInterval,
    IllDefined,
}

/// Non-fatal diagnostic carried through to reports verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Warning {
    pub kind: WarningKind,
    pub message: String,
}

impl Warning {
    pub fn new(kind: WarningKind, message: String) -> Self {
        Warning { kind, message }
    }
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}
