use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("pretrained weights for `{backbone}` are unavailable: {reason}")]
    WeightsUnavailable { backbone: String, reason: String },

    #[error("layer `{layer}` not found; available layers: {}", available.join(", "))]
    LayerNotFound { layer: String, available: Vec<String> },

    #[error("class index {index} is out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },

    #[error("training diverged: non-finite {what} loss at epoch {epoch}")]
    Divergence { epoch: usize, what: &'static str },

    #[error("the training set is empty")]
    EmptyTrainSet,

    #[error("invalid scaling constant {0}: bases must be positive")]
    InvalidScalingConstant(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint `{}`: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] signfold_core::Error),
}

impl From<Error> for signfold_core::Error {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(inner) => inner,
            other => signfold_core::Error::Runtime(other.to_string()),
        }
    }
}
