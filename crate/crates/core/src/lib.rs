//! Core models for a desk-scale three-state time-bin BB84 simulator.
//!
//! The crate is split into four layers:
//!
//! - [`units`]: dB/dBm/linear conversions, kept in one place so every module
//!   agrees on what a decibel is.
//! - [`model`]: validated protocol and link parameter sets, the calibrated
//!   reference parameter set, and the versioned on-disk config format.
//! - [`channel`]: photon-number-resolved channel statistics — closed-form
//!   expectations and the seeded aggregate Monte-Carlo block simulator.
//! - [`finitekey`]: the one-decoy finite-key engine turning per-block
//!   detection/error counts into a secret key length with every intermediate
//!   bound exposed.

pub mod channel;
pub mod finitekey;
pub mod model;
pub mod units;

pub use channel::{
    background_rate, click_probability, dead_time_throughput, expected_observables,
    simulate_block, transmittance, Basis, BlockCounts, ChannelError, DriftProfile, GroundTruth,
};
pub use finitekey::{
    binary_entropy, ec_leakage, hoeffding_delta, phase_error_bound, secret_key_length,
    single_photon_bound, tau_n, vacuum_bounds, FiniteKeyError, KeyLengthReport, ZeroReason,
};
pub use model::{paper_defaults, validate, ConfigFile, LinkModel, ModelError, ProtocolConfig, SyncMode, Violation};
