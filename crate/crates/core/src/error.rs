use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
///
/// Variants are grouped by the exit code the command-line front end maps them
/// to: configuration problems (2), bad input data (3) and numerical failures (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("linkage error: {0}")]
    Linkage(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("design error: {0}")]
    Design(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("inference error: {0}")]
    Inference(String),
    #[error("covariance error: {0}")]
    Covariance(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("unidentifiable: {0}")]
    Unidentifiable(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Json(_) => 2,
            Error::Schema(_)
            | Error::Data(_)
            | Error::Linkage(_)
            | Error::Registration(_)
            | Error::Grouping(_)
            | Error::Shape(_)
            | Error::Io { .. }
            | Error::Csv(_) => 3,
            Error::Domain(_)
            | Error::Design(_)
            | Error::Metric(_)
            | Error::Numerical(_)
            | Error::Model(_)
            | Error::Inference(_)
            | Error::Covariance(_)
            | Error::Unidentifiable(_)
            | Error::Simulation(_) => 4,
        }
    }
}
