use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is singular (min eigenvalue {0:e})")]
    Singular(f64),
    #[error("matrix is rank deficient (min eigenvalue of CCᵀ {0:e})")]
    RankDeficient(f64),
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("density is not scalar")]
    NotScalar,
    #[error("quadrature did not reach tolerance {tol:e} on [{lo}, {hi}]")]
    QuadratureFailure { lo: f64, hi: f64, tol: f64 },
    #[error("density vanishes on an interior cell at w = {0}")]
    SingularDensity(f64),
    #[error("Fisher information has zero trace")]
    ZeroTrace,
    #[error("query is identically zero")]
    ZeroQuery,
    #[error("domain violation: {0}")]
    DomainViolation(String),
    #[error("observability Gramian is singular (min eigenvalue {0:e})")]
    SingularGramian(f64),
    #[error("horizon T = {0} is too short; closed forms need T > 2")]
    HorizonTooShort(usize),
    #[error("delta = {0} is outside (0, 1/2]")]
    DeltaOutOfRange(f64),
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown mechanism `{0}`")]
    UnknownMechanism(String),
    #[error("incompatible query: {0}")]
    IncompatibleQuery(String),
    #[error("could not bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NonSymmetric(_) => "non_symmetric",
            Error::NotPsd(_) => "not_psd",
            Error::Singular(_) => "singular",
            Error::RankDeficient(_) => "rank_deficient",
            Error::InvalidInterval { .. } => "invalid_interval",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NotScalar => "not_scalar",
            Error::QuadratureFailure { .. } => "quadrature_failure",
            Error::SingularDensity(_) => "singular_density",
            Error::ZeroTrace => "zero_trace",
            Error::ZeroQuery => "zero_query",
            Error::DomainViolation(_) => "domain_violation",
            Error::SingularGramian(_) => "singular_gramian",
            Error::HorizonTooShort(_) => "horizon_too_short",
            Error::DeltaOutOfRange(_) => "delta_out_of_range",
            Error::Parse { .. } => "parse_error",
            Error::Config(_) => "config_error",
            Error::UnknownMechanism(_) => "unknown_mechanism",
            Error::IncompatibleQuery(_) => "incompatible_query",
            Error::Bind { .. } => "bind_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "malformed_request",
        }
    }
}
