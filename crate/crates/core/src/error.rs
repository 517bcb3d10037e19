use std::path::PathBuf;

use etts_autograd::ParamError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav format error in {path}: {property}")]
    WavFormat { path: PathBuf, property: String },
    #[error("missing file: {0}")]
    Missing(PathBuf),
    #[error("waveform has {len} samples, shorter than one analysis window of {win}")]
    TooShort { len: usize, win: usize },
    #[error("invalid mel config: {0}")]
    MelConfig(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("no voiced frames in corpus")]
    NoVoicedFrames,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("unknown phoneme token `{0}`")]
    UnknownToken(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("latent bank error: {0}")]
    LatentBank(String),
    #[error("frozen parameters changed during training: {0}")]
    FrozenIntegrity(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
