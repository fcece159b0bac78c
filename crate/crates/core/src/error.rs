use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (max asymmetry {asymmetry:.3e}): {context}")]
    NotHermitian { context: String, asymmetry: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix has eigenvalue {eigenvalue:.3e} below the PSD repair threshold: {context}")]
    NotPsd { context: String, eigenvalue: f64 },

    #[error("instant n = {n} outside the data phase [{lambda}, {tau_c}]")]
    InstantOutOfRange { n: usize, lambda: usize, tau_c: usize },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("negative SINR {value} at position {index}")]
    NegativeSinr { index: usize, value: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("feasibility indeterminate at t = {t:.6e}: {reason}")]
    Indeterminate { t: f64, reason: String },

    #[error("bisection failed with bracket [{t_min:.6e}, {t_max:.6e}]: {source}")]
    Bisection {
        t_min: f64,
        t_max: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("too few Monte Carlo realizations: {0} (need at least 100)")]
    TooFewRealizations(usize),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    /// Short stable tag for tabular output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "invalid_config",
            Self::Dimension(_) => "dimension",
            Self::NotHermitian { .. } => "not_hermitian",
            Self::NotPositiveDefinite(_) => "not_positive_definite",
            Self::NotPsd { .. } => "not_psd",
            Self::InstantOutOfRange { .. } => "instant_out_of_range",
            Self::Degenerate(_) => "degenerate",
            Self::NegativeSinr { .. } => "negative_sinr",
            Self::Unsupported(_) => "unsupported",
            Self::Indeterminate { .. } => "indeterminate",
            Self::Bisection { .. } => "bisection",
            Self::TooFewRealizations(_) => "too_few_realizations",
            Self::Parse(_) => "parse",
            Self::Io { .. } => "io",
            Self::Serialize(_) => "serialize",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
