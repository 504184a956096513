//! Two-party post-processing sessions for the three-state time-bin QKD
//! simulator.
//!
//! The crate turns simulated transmission into an identical final key on
//! both sides via an explicit message exchange: detection reporting, basis
//! reveal, sifting, disclosed-sample QBER estimation, modeled
//! reconciliation, a universal-hash correctness tag, and Toeplitz privacy
//! amplification sized by the finite-key bound from `timebin-core`.
//!
//! The parties are deterministic state machines ([`party::Alice`],
//! [`party::Bob`]) speaking a versioned, length-prefixed wire format
//! ([`wire`]) over any reliable ordered byte stream ([`transport`]): an
//! in-memory duplex for in-process runs and a TCP stream for the
//! two-process mode. Sessions are bit-reproducible from a single seed, and
//! every exchanged frame is recorded in a [`run::SessionTranscript`] that
//! can be audited against the disclosure budget.
//!
//! Scope notes: the classical channel is assumed authenticated (no MAC is
//! modeled), reconciliation is modeled by granting Bob the sender's kept
//! bits while charging λ_EC, and all randomness is pseudorandom from the
//! session seed surfaced in the `Hello` frame.

pub mod bits;
pub mod keyfile;
pub mod party;
pub mod records;
pub mod run;
pub mod toeplitz;
pub mod transport;
pub mod wire;

pub use bits::BitString;
pub use keyfile::{read_key_file, write_key_file, KeyFileError};
pub use party::{config_digest, tag_width, Alice, Bob, ProtocolViolation, SessionPolicy};
pub use records::{
    alice_choice, in_sample, realize_detections, sift, DetectionRecord, Intensity, PulseRecord,
    RealizeError, SiftError, SiftOutcome,
};
pub use run::{
    audit_transcript, drive_alice, drive_bob, run_session, Direction, PartyOutcome, SessionError,
    SessionOutcome, SessionTranscript, TranscriptAudit, TranscriptEntry,
};
pub use toeplitz::{toeplitz_hash, ToeplitzError};
pub use transport::{MemoryDuplex, StreamTransport, TcpTransport, Transport};
pub use wire::{
    parse_message, serialize_message, AbortReason, Message, WireError, MAX_PAYLOAD,
    PROTOCOL_VERSION,
};
