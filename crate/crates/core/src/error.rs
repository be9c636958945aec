use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image size {height}x{width} is not divisible by patch size {patch}")]
    Divisibility {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("invalid tap stages {stages:?} for {layers} encoder layers: {reason}")]
    Stage {
        stages: Vec<usize>,
        layers: usize,
        reason: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for configuration key `{key}`")]
    BadValue { key: String, value: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sample {sample} has no unmasked key to attend to")]
    AllMasked { sample: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },
    #[error("embedding widths differ: visual {visual}, textual {textual}")]
    Width { visual: usize, textual: usize },
    #[error("{tokens} visual tokens do not form a {grid_h}x{grid_w} patch grid")]
    Grid {
        tokens: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("expected {expected} FPN stages, got {got}")]
    StageCount { expected: usize, got: usize },
    #[error("metric accumulator is empty")]
    Empty,
    #[error("could not place objects after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("no template uniquely denotes object {target}")]
    NoUniqueReference { target: usize },
    #[error("attention weights were not recorded for source `{0}`")]
    NotRecorded(String),
    #[error("ordering violated: `{first}` ({first_value}) is not below `{second}` ({second_value})")]
    OrderingViolation {
        first: String,
        first_value: u64,
        second: String,
        second_value: u64,
    },
    #[error("non-finite loss at step {step}: bce={bce} dice={dice}")]
    NonFiniteLoss { step: usize, bce: f64, dice: f64 },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("blob `{0}` failed its checksum")]
    Hash(String),
    #[error("checkpoint configuration differs from runtime configuration on `{0}`")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Divisibility { .. }
                | Error::Stage { .. }
                | Error::Config(_)
                | Error::UnknownKey(_)
                | Error::BadValue { .. }
                | Error::ConfigMismatch(_)
        )
    }
}
