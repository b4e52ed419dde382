use thiserror::Error;

/// Errors surfaced by the simulation, training, and I/O layers.
///
/// Each variant maps onto one of the stable CLI exit codes via
/// [`Error::exit_code`]: 2 for configuration problems, 3 for I/O,
/// 4 for numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid coil count: {0}")]
    InvalidCoilCount(usize),

    #[error("field value {got:.3} Hz exceeds configured limit {limit:.3} Hz")]
    FieldRange { got: f64, limit: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty support mask: image is identically zero")]
    EmptyMask,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("container error: {0}")]
    Container(#[from] hdf5::Error),
}

impl Error {
    /// Stable process exit code for scripting: 0 success, 2 config,
    /// 3 I/O, 4 numeric/divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidDimension(_)
            | Error::InvalidCoilCount(_)
            | Error::FieldRange { .. }
            | Error::Config(_)
            | Error::EmptyMask
            | Error::UndefinedMetric(_)
            | Error::ShapeMismatch(_)
            | Error::DegenerateData(_) => 2,
            Error::Io(_) | Error::Container(_) => 3,
            Error::Divergence { .. } | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
