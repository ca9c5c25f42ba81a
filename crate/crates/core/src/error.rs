//! Error taxonomy shared by every module.
//!
//! The variants map one-to-one onto the CLI exit-code classes: config-like
//! problems (bad shapes, bad addresses, bad configuration), data/format
//! problems, and violated preconditions.

use thiserror::Error;

/// All failure modes produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or weight-matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model, campaign, or geometry configuration is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A dataset violates its invariants (empty, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A flip spec or DRAM address does not resolve to a real location.
    #[error("address error: {0}")]
    Address(String),

    /// A model does not fit in the given DRAM geometry.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A serialized artifact is malformed (bad magic, truncation, ...).
    #[error("format error: {0}")]
    Format(String),

    /// An operation's stated precondition does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
