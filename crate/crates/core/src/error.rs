use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root `{0}` does not exist")]
    DatasetNotFound(PathBuf),

    #[error("dataset root `{0}` contains no class directories")]
    EmptyDataset(PathBuf),

    #[error("class directory `{0}` holds no decodable images")]
    EmptyClass(String),

    #[error("{skipped} of {total} image files could not be decoded (at most 1% may be skipped)")]
    TooManyUndecodable { skipped: usize, total: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("pixel value {value} is outside [0, 255]")]
    InvalidPixelRange { value: f64 },

    #[error("normalization statistics are degenerate: channel {channel} has zero variance")]
    DegenerateStats { channel: usize },

    #[error("normalization statistics must be fit on the train split, found `{0}`")]
    StatsNotFromTrain(String),

    #[error("class `{class}` cannot be stratified: {reason}")]
    StratificationInfeasible { class: String, reason: String },

    #[error("label lists differ in length: {truth} true vs {predicted} predicted")]
    LabelMismatch { truth: usize, predicted: usize },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("cannot compute metrics over zero samples")]
    EmptyEvaluation,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid gradients: {0}")]
    InvalidGradients(String),

    #[error("inconsistent fold reports: {0}")]
    InconsistentReports(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model runtime: {0}")]
    Runtime(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}
