use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or parameter dimension does not satisfy an operation contract.
    #[error("dimension mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Dim {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("cycle detected: back edge {from} -> {to}")]
    Cycle { from: String, to: String },

    #[error("node `{node}`: unknown kind `{kind}`")]
    UnknownKind { node: String, kind: String },

    #[error("channel mismatch: node `{consumer}` expects {expected} input channels but `{producer}` provides {actual}")]
    ChannelMismatch {
        producer: String,
        consumer: String,
        expected: usize,
        actual: usize,
    },

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("pruning error: {0}")]
    Prune(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_node(self, node: &str) -> Error {
        match self {
            // Already attributed errors keep their original node.
            e @ (Error::Node { .. } | Error::ChannelMismatch { .. } | Error::MissingWeight(_)) => e,
            e => Error::Node {
                node: node.to_string(),
                source: Box::new(e),
            },
        }
    }
}
