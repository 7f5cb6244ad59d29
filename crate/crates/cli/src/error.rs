use scnn_core::ScnnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ScnnError),
    /// A check ran to completion and found values out of tolerance.
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Usage(String),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    AtPath { path: String, source: Box<CliError> },
}

impl CliError {
    /// 1 check failure, 2 usage, 3 io, 4 malformed file, 5 shape, 6 config.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::AtPath { source, .. } => source.exit_code(),
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Csv(_) => 3,
            CliError::Core(e) => match e {
                ScnnError::Io(_) => 3,
                ScnnError::Format(_) => 4,
                ScnnError::DimensionMismatch { .. }
                | ScnnError::ShapeMismatch(_)
                | ScnnError::IndexOutOfRange { .. } => 5,
                ScnnError::Config(_) | ScnnError::InvalidArgument(_) => 6,
                ScnnError::EmptyInput(_) => 2,
                ScnnError::MissingCache(_) => 1,
            },
        }
    }
}

/// Attaches the offending path to an error.
pub fn at<T, E: Into<CliError>>(path: &std::path::Path, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::AtPath {
        path: path.display().to_string(),
        source: Box::new(e.into()),
    })
}
