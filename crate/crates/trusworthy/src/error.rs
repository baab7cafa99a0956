use std::path::PathBuf;

use trusworthy_core::ensemble::EnsembleError;
use trusworthy_core::heatmap::HeatmapError;
use trusworthy_core::metrics::MetricError;
use trusworthy_core::phantom::PhantomError;
use trusworthy_core::preprocess::PreprocessError;
use trusworthy_core::splits::SplitError;
use trusworthy_core::vicreg::VicregError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("training data holds a single class")]
    SingleClassData,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Vicreg(#[from] VicregError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const TRAINING: u8 = 5;
    pub const IO: u8 = 6;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::UnknownConfigKey(_) => exit::CONFIG,
            Error::Data(_)
            | Error::SingleClassData
            | Error::Phantom(_)
            | Error::Preprocess(_)
            | Error::Split(_)
            | Error::Heatmap(_)
            | Error::Metric(_) => exit::DATA,
            Error::Training(_) | Error::Backend(_) | Error::Vicreg(_) | Error::Ensemble(_) => {
                exit::TRAINING
            }
            Error::Io { .. } => exit::IO,
        }
    }
}
