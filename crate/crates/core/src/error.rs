use thiserror::Error;

use crate::numerics::FloatFormat;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tile {tile} out of bounds for {rows}x{cols} matrix")]
    TileOutOfBounds {
        tile: String,
        rows: usize,
        cols: usize,
    },

    #[error("unsupported widening pair {input:?} -> {acc:?}")]
    UnsupportedWidening {
        input: FloatFormat,
        acc: FloatFormat,
    },

    #[error("unknown float format {0:?}; valid formats: fp64, fp32, fp16, bf16, fp8e4m3, fp8e5m2")]
    UnknownFormat(String),

    #[error("cluster count {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("invalid tiling plan: {0}")]
    InvalidPlan(String),

    #[error("no feasible tiling for {0}")]
    NoFeasiblePlan(String),

    #[error("malformed reduction schedule: {0}")]
    Schedule(String),

    #[error("invalid block sizes: {0}")]
    BlockSize(String),

    #[error("invalid route: {0}")]
    Route(String),

    #[error("kv cache overflow: {len} + {extra} exceeds {max}")]
    CacheOverflow {
        len: usize,
        extra: usize,
        max: usize,
    },

    #[error("config error in field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("bad matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
