//! Scenario runner for the time-bin QKD simulator.
//!
//! Wraps the closed-form channel model, the Monte-Carlo block simulator,
//! and the two-party session engine behind four reproducible artifact
//! generators:
//!
//! - [`sweep::run_rate_vs_loss`]: secret key rate versus channel attenuation.
//! - [`sweep::run_rate_vs_power`]: secret key rate versus co-propagating
//!   classical launch power.
//! - [`stability::run_stability`]: per-interval rate/error time series under
//!   a drifting link.
//! - [`sessions::run_full_session`]: one complete two-party session with key
//!   files, transcript, and a summary row.
//!
//! Every generator emits RFC-4180 CSV with a fixed, versioned column order
//! (see [`rows`]) and is deterministic in `(spec, seed)`: a master seed
//! expands into per-point and per-block seeds by counter splitting, so rows
//! never depend on evaluation order. [`calibrate`] re-derives the frozen
//! device constants from the reference operating points.

pub mod calibrate;
pub mod rows;
pub mod sessions;
pub mod stability;
pub mod sweep;

use thiserror::Error;
use timebin_core::{FiniteKeyError, ModelError};
use timebin_session::{KeyFileError, SessionError, WireError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    FiniteKey(#[from] FiniteKeyError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    KeyFile(#[from] KeyFileError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    /// The spawned peer process failed outside the session protocol.
    #[error("peer process exited with status {status}: {stderr}")]
    Peer { status: i32, stderr: String },
    #[error("alice and bob key files differ")]
    KeyMismatch,
}

impl HarnessError {
    /// CLI exit code: 3 for protocol-level aborts, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Session(SessionError::Aborted { .. }) => 3,
            HarnessError::Peer { status: 3, .. } => 3,
            HarnessError::KeyMismatch => 3,
            _ => 2,
        }
    }
}
