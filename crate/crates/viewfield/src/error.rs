use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate keyframe id {0}")]
    DuplicateKeyframe(u64),
    #[error("unknown keyframe id {0}")]
    UnknownKeyframe(u64),
    #[error("unknown model id {0}")]
    UnknownModel(u64),
    #[error("model cap reached ({0} models)")]
    ModelCapReached(usize),
    #[error("empty atlas")]
    EmptyAtlas,
    #[error("malformed stream: {0}")]
    MalformedStream(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
