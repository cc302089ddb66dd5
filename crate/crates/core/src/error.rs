use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("build error at layer {index}: {reason}")]
    Build { index: usize, reason: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("layer {index} is a {kind} layer, expected {expected}")]
    LayerKind {
        index: usize,
        kind: &'static str,
        expected: &'static str,
    },

    #[error("sharpness of layer {index} cannot decrease from {current} to {requested}")]
    Monotonicity { index: usize, current: f64, requested: f64 },

    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),

    #[error("network structure: {0}")]
    Structure(String),

    #[error("network is not fully sharpened; layers below s=1: {}", format_layers(.0))]
    NotFullySharpened(Vec<(usize, f64)>),

    #[error("format error: {0}")]
    Format(String),

    #[error("file truncated at byte offset {offset}: {context}")]
    Truncated { offset: u64, context: String },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

fn format_layers(layers: &[(usize, f64)]) -> String {
    layers
        .iter()
        .map(|(i, s)| format!("{i} (s={s})"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
