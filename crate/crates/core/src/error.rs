use thiserror::Error;

use crate::arch::Coord;
use crate::numerics::ElemType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("invalid architecture field `{field}`: {reason}")]
    InvalidArch { field: &'static str, reason: String },

    #[error("coordinate {coord} outside {columns}x{rows} grid")]
    OutOfGrid { coord: Coord, columns: u32, rows: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("quantization range is degenerate (min = max = {0})")]
    DegenerateRange(f32),

    #[error(
        "{what} needs {needed} bytes of local memory but only {available} are available; \
         smallest feasible split is {suggestion}"
    )]
    LocalMemoryOverflow {
        what: String,
        needed: u64,
        available: u64,
        suggestion: String,
    },

    #[error(
        "GEMM with K={k} needs a cascade chain of {required} engines, above the limit of {limit}; \
         slice K across at least {min_clusters} clusters"
    )]
    CascadeTooLong {
        k: usize,
        required: usize,
        limit: usize,
        min_clusters: usize,
    },

    #[error("memory-tile staging needs {demand} tiles but the pool has {available}: {report}")]
    MemtileExhausted {
        demand: usize,
        available: usize,
        report: String,
    },

    #[error("placement infeasible: {0}")]
    Placement(String),

    #[error("graph is invalid: {0}")]
    InvalidGraph(String),

    #[error("element type {etype} unsupported for {context}")]
    UnsupportedElemType { etype: ElemType, context: String },

    #[error("missing input tensor `{0}`")]
    MissingInput(String),

    #[error("{0}")]
    Infeasible(String),

    #[error("no configuration matches the targets: {0}")]
    FitFailed(String),
}
