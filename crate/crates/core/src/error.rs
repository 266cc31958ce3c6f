use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition did not hold.
    #[error("{0}")]
    Contract(String),
    #[error("packet {packet} has zero subcarrier energy; cannot calibrate")]
    ZeroEnergy { packet: usize },
    #[error("{stage} failed for AP {ap}: {source}")]
    Stage {
        stage: &'static str,
        ap: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("missing CIR for AP ids {0:?}")]
    MissingAps(Vec<usize>),
    #[error("loss became non-finite at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
