use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("fully masked row {row}: every key is blocked")]
    FullyMaskedRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} out of range [0, {t_max})")]
    Timestep { t: usize, t_max: usize },

    #[error("mask construction error: {0}")]
    Mask(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("unknown task tag {0:?} (expected canny, depth or subject)")]
    UnknownTask(String),

    #[error("lora error: {0}")]
    Lora(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
