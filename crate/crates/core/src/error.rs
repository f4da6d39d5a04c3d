use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sprite variant: {0}")]
    InvalidVariant(String),

    #[error("inconsistent scene spec: {0}")]
    InconsistentSpec(String),

    #[error("sprite patch of {patch}px overflows a {cell}px cell")]
    RenderOverflow { patch: usize, cell: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quantifier calibration failed; no bandwidth reaches the target band\n{table}")]
    Calibration { table: String },

    #[error("graph error at layer {layer}: {msg}")]
    Graph { layer: usize, msg: String },

    #[error("loss error: {0}")]
    Loss(String),

    #[error("state error: {0}")]
    State(String),

    #[error("divergence: non-finite gradient or loss in `{0}`")]
    Divergence(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pretraining failed: {0}")]
    Pretraining(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a path to a `std::io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
