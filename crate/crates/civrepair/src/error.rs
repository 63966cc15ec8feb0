//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by parsing, simulation, analysis, and repair stages.
#[derive(Debug, Error)]
pub enum Error {
    /// A structured-text document failed to parse.
    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    /// A parsed document violates an invariant (e.g. zero untrusted compartments).
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// An access path does not resolve against a type or value tree.
    #[error("path `{path}` does not resolve: {detail}")]
    PathUnresolvable { path: String, detail: String },

    /// A mutation strategy does not apply to the targeted leaf type.
    #[error("strategy `{strategy}` does not apply to {leaf} at `{path}`")]
    StrategyMismatch {
        strategy: String,
        leaf: String,
        path: String,
    },

    /// A payload does not structurally match the scenario's payload template.
    #[error("payload shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Static call chain exceeds the executor depth limit.
    #[error("call chain exceeds depth limit {limit} (at `{symbol}`)")]
    DepthLimit { symbol: String, limit: usize },

    /// Patch target has no modifiable source.
    #[error("no source available for `{0}`")]
    NoSource(String),

    /// A guard patch names an op index outside the target body.
    #[error("op index {index} out of range for `{symbol}` ({len} ops)")]
    OpIndexOutOfRange {
        symbol: String,
        index: usize,
        len: usize,
    },

    /// No trusted frame with the crash variable in scope exists.
    #[error("no trusted-side patch candidate: {0}")]
    NoTrustedCandidate(String),

    /// Every candidate lacks source; a human has to place the fix.
    #[error("human review required: {0}")]
    HumanReviewRequired(String),

    /// A patch generation backend failed.
    #[error("backend `{backend}` failed: {detail}")]
    Backend { backend: String, detail: String },

    /// A verdict-producing operation was called out of contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            detail: detail.into(),
        }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
