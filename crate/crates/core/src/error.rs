use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("obj line {line}: {msg}")]
    ObjParse { line: usize, msg: String },

    #[error("cannot build a BVH over an empty triangle list")]
    EmptyScene,

    #[error("BVH depth {depth} exceeds the configured maximum of {max}")]
    TreeTooDeep { depth: usize, max: usize },

    #[error("{reason} (address {addr:#x})")]
    NodeAddress { addr: u64, reason: &'static str },

    #[error("bad BVH image: {0}")]
    BvhFormat(String),

    #[error("traversal stack overflow on thread {thread}: depth {depth} exceeds {max}")]
    StackOverflow {
        thread: usize,
        depth: usize,
        max: usize,
    },

    #[error("unaligned memory access at {0:#x}")]
    UnalignedAccess(u64),

    #[error("fill for sector {0:#x} without a matching MSHR entry")]
    FillWithoutMshr(u64),

    #[error("config line {line}: {key}: {msg}")]
    Config {
        line: usize,
        key: String,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("workloads differ: {baseline} vs {run} node visits")]
    WorkloadMismatch { baseline: u64, run: u64 },

    #[error("sweep over {0} has no values")]
    EmptySweep(String),

    #[error("simulation did not finish within {0} cycles")]
    Deadlock(u64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
