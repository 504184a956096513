//! Session drivers: wire the two state machines over a transport, record
//! the transcript, and audit what was disclosed.
//!
//! Every message crosses the wire as serialized bytes and is re-parsed on
//! receipt, in-memory runs included, so the codec is exercised end to end.
//! A session transcript is the byte-exact, direction-annotated frame
//! sequence; replaying it through [`audit_transcript`] independently
//! re-derives the sifted counts and checks the disclosure budget.

use crate::bits::BitString;
use crate::party::{tag_width, Alice, Bob, ProtocolViolation, SessionPolicy};
use crate::transport::{MemoryDuplex, Transport};
use crate::wire::{parse_message, serialize_message, AbortReason, Message, WireError};
use thiserror::Error;
use timebin_core::{Basis, KeyLengthReport, LinkModel, ProtocolConfig};

/// Who sent a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AliceToBob,
    BobToAlice,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub frame: Vec<u8>,
}

/// Ordered, direction-annotated record of every frame in a session.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionTranscript {
    pub entries: Vec<TranscriptEntry>,
}

const TRANSCRIPT_MAGIC: [u8; 4] = *b"TBTR";
const TRANSCRIPT_VERSION: u32 = 1;

impl SessionTranscript {
    fn record(&mut self, direction: Direction, frame: &[u8]) {
        self.entries.push(TranscriptEntry {
            direction,
            frame: frame.to_vec(),
        });
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.frame.len()).sum()
    }

    /// Parses every frame back into messages, in order.
    pub fn messages(&self) -> Result<Vec<(Direction, Message)>, WireError> {
        self.entries
            .iter()
            .map(|e| {
                let (msg, used) = parse_message(&e.frame)?;
                if used != e.frame.len() {
                    return Err(WireError::Malformed(
                        "transcript frame has trailing bytes".into(),
                    ));
                }
                Ok((e.direction, msg))
            })
            .collect()
    }

    /// Flat binary encoding for artifact output.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&TRANSCRIPT_MAGIC);
        out.extend_from_slice(&TRANSCRIPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.push(match e.direction {
                Direction::AliceToBob => 0,
                Direction::BobToAlice => 1,
            });
            out.extend_from_slice(&(e.frame.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.frame);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let bad = |what: &str| WireError::Malformed(format!("transcript: {what}"));
        if bytes.len() < 12 || bytes[..4] != TRANSCRIPT_MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TRANSCRIPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let mut pos = 12usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            if bytes.len() < pos + 5 {
                return Err(bad("entry header truncated"));
            }
            let direction = match bytes[pos] {
                0 => Direction::AliceToBob,
                1 => Direction::BobToAlice,
                _ => return Err(bad("invalid direction byte")),
            };
            let len = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
            pos += 5;
            if bytes.len() < pos + len {
                return Err(bad("entry frame truncated"));
            }
            entries.push(TranscriptEntry {
                direction,
                frame: bytes[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    /// The session ended with an explicit abort frame.
    #[error("session aborted ({reason}): {detail}")]
    Aborted {
        reason: AbortReason,
        detail: String,
        transcript: SessionTranscript,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("transport failure: {0}")]
    Io(#[from] std::io::Error),
    /// Local state machine misuse; indicates a driver bug, not peer input.
    #[error(transparent)]
    Internal(#[from] ProtocolViolation),
}

impl SessionError {
    /// Abort reason, if the session ended with an abort frame.
    pub fn abort_reason(&self) -> Option<AbortReason> {
        match self {
            SessionError::Aborted { reason, .. } => Some(*reason),
            _ => None,
        }
    }
}

/// One party's view of a completed session.
#[derive(Clone, Debug)]
pub struct PartyOutcome {
    pub key: BitString,
    pub report: KeyLengthReport,
    pub transcript: SessionTranscript,
}

struct Endpoint<'a, T: Transport> {
    transport: &'a mut T,
    transcript: SessionTranscript,
    outgoing: Direction,
}

impl<'a, T: Transport> Endpoint<'a, T> {
    fn new(transport: &'a mut T, outgoing: Direction) -> Self {
        Self {
            transport,
            transcript: SessionTranscript::default(),
            outgoing,
        }
    }

    fn incoming(&self) -> Direction {
        match self.outgoing {
            Direction::AliceToBob => Direction::BobToAlice,
            Direction::BobToAlice => Direction::AliceToBob,
        }
    }

    fn send(&mut self, msg: &Message) -> Result<(), SessionError> {
        let frame = serialize_message(msg);
        self.transcript.record(self.outgoing, &frame);
        self.transport.send_frame(&frame)?;
        Ok(())
    }

    /// Receives one message; a peer abort ends the session here.
    fn recv(&mut self) -> Result<Message, SessionError> {
        let frame = self.transport.recv_frame()?;
        let (msg, used) = parse_message(&frame)?;
        if used != frame.len() {
            return Err(WireError::Malformed("frame with trailing bytes".into()).into());
        }
        self.transcript.record(self.incoming(), &frame);
        if let Message::Abort { reason, detail } = msg {
            return Err(SessionError::Aborted {
                reason,
                detail,
                transcript: std::mem::take(&mut self.transcript),
            });
        }
        Ok(msg)
    }

    /// Sends the handler's reply; abort replies and local protocol
    /// violations terminate the session after hitting the wire.
    fn respond(
        &mut self,
        result: Result<Message, ProtocolViolation>,
    ) -> Result<(), SessionError> {
        match result {
            Ok(Message::Abort { reason, detail }) => {
                self.send(&Message::Abort {
                    reason,
                    detail: detail.clone(),
                })?;
                Err(SessionError::Aborted {
                    reason,
                    detail,
                    transcript: std::mem::take(&mut self.transcript),
                })
            }
            Ok(msg) => self.send(&msg),
            Err(violation) => {
                let detail = violation.0.clone();
                let _ = self.send(&Message::Abort {
                    reason: AbortReason::Channel,
                    detail: detail.clone(),
                });
                Err(SessionError::Aborted {
                    reason: AbortReason::Channel,
                    detail,
                    transcript: std::mem::take(&mut self.transcript),
                })
            }
        }
    }
}

/// Runs Alice's side of one session over `transport`.
pub fn drive_alice<T: Transport>(
    transport: &mut T,
    config: &ProtocolConfig,
    policy: &SessionPolicy,
    seed: u64,
) -> Result<PartyOutcome, SessionError> {
    let mut ep = Endpoint::new(transport, Direction::AliceToBob);
    let mut alice = Alice::new(config.clone(), policy.clone(), seed);

    let hello = alice.hello()?;
    ep.send(&hello)?;
    let msg = ep.recv()?;
    ep.respond(alice.on_detection_report(msg))?;
    let msg = ep.recv()?;
    ep.respond(alice.on_check_report(msg))?;
    let msg = ep.recv()?;
    ep.respond(alice.on_counts_ack(msg))?;
    let msg = ep.recv()?;
    ep.respond(alice.on_tag_verdict(msg))?;
    let msg = ep.recv()?;
    alice.on_finished(msg)?;

    Ok(PartyOutcome {
        key: alice.final_key().cloned().expect("key exists after Finished"),
        report: alice.report().cloned().expect("report exists after Finished"),
        transcript: ep.transcript,
    })
}

/// Runs Bob's side of one session over `transport`.
pub fn drive_bob<T: Transport>(
    transport: &mut T,
    config: &ProtocolConfig,
    link: &LinkModel,
    policy: &SessionPolicy,
) -> Result<PartyOutcome, SessionError> {
    let mut ep = Endpoint::new(transport, Direction::BobToAlice);
    let mut bob = Bob::new(config.clone(), link.clone(), policy.clone());

    let msg = ep.recv()?;
    ep.respond(bob.on_hello(msg))?;
    let msg = ep.recv()?;
    ep.respond(bob.on_basis_reveal(msg))?;
    let msg = ep.recv()?;
    ep.respond(bob.on_reconcile(msg))?;
    let msg = ep.recv()?;
    ep.respond(bob.on_tag_exchange(msg))?;
    let msg = ep.recv()?;
    ep.respond(bob.on_pa_seed(msg))?;

    Ok(PartyOutcome {
        key: bob.final_key().cloned().expect("key exists after Finished"),
        report: bob.report().cloned().expect("report exists after PA"),
        transcript: ep.transcript,
    })
}

/// A completed in-process session.
#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub alice_key: BitString,
    pub bob_key: BitString,
    /// Alice's finite-key evaluation (Bob's is in `bob_report`; the two are
    /// computed from identical tallies and must agree).
    pub report: KeyLengthReport,
    pub bob_report: KeyLengthReport,
    /// Alice's view of the frame sequence.
    pub transcript: SessionTranscript,
    pub audit: TranscriptAudit,
}

/// Runs a full session in-process: both parties on an in-memory duplex
/// pipe, Bob on a helper thread, every frame serialized and re-parsed.
pub fn run_session(
    config: &ProtocolConfig,
    link: &LinkModel,
    policy: &SessionPolicy,
    seed: u64,
) -> Result<SessionOutcome, SessionError> {
    let (mut ta, mut tb) = MemoryDuplex::pair();
    let (alice, bob) = std::thread::scope(|s| {
        let bob = s.spawn(move || drive_bob(&mut tb, config, link, policy));
        let alice = drive_alice(&mut ta, config, policy, seed);
        // Hang up Alice's endpoint so Bob can never block on a dead peer.
        drop(ta);
        (alice, bob.join().expect("bob thread panicked"))
    });
    let alice = alice?;
    let bob = bob?;
    let audit = audit_transcript(&alice.transcript, &alice.report, config)?;
    Ok(SessionOutcome {
        alice_key: alice.key,
        bob_key: bob.key,
        report: alice.report,
        bob_report: bob.report,
        transcript: alice.transcript,
        audit,
    })
}

/// What an independent reading of the transcript shows was disclosed.
#[derive(Clone, Copy, Debug)]
pub struct TranscriptAudit {
    /// Frames follow the nominal ten-message sequence with correct directions.
    pub sequence_ok: bool,
    /// Sifted Z∩Z count re-derived from the report and reveal frames alone.
    pub sifted_z: u64,
    /// Raw key bits disclosed for QBER estimation.
    pub sample_bits: u64,
    /// Bits of the reconciliation grant (accounted as modeled λ_EC).
    pub grant_bits: u64,
    /// Correctness-tag width on the wire.
    pub tag_bits: u8,
    /// λ_EC charged by the finite-key report.
    pub modeled_ec_bits: f64,
    /// sample + grant exactly partition the sifted Z set.
    pub counts_consistent: bool,
    /// Tag width equals ⌈log₂(2/ε_cor)⌉ (or the kept set, if smaller).
    pub tag_width_ok: bool,
    /// Final length never exceeds the bound or the granted material.
    pub pa_length_ok: bool,
    /// estimation + reconciliation + tag stays within
    /// sample + λ_EC + tag width.
    pub disclosure_within_budget: bool,
}

impl TranscriptAudit {
    pub fn ok(&self) -> bool {
        self.sequence_ok
            && self.counts_consistent
            && self.tag_width_ok
            && self.pa_length_ok
            && self.disclosure_within_budget
    }
}

/// Audits a successful session's transcript against the disclosure budget.
///
/// The sifted-Z count is recomputed from the detection report and basis
/// reveal without trusting either party's tallies; the sample and grant
/// sizes must partition it exactly.
pub fn audit_transcript(
    transcript: &SessionTranscript,
    report: &KeyLengthReport,
    config: &ProtocolConfig,
) -> Result<TranscriptAudit, WireError> {
    let msgs = transcript.messages()?;
    let expected: [(Direction, u8); 10] = [
        (Direction::AliceToBob, 0x01),
        (Direction::BobToAlice, 0x02),
        (Direction::AliceToBob, 0x03),
        (Direction::BobToAlice, 0x04),
        (Direction::AliceToBob, 0x05),
        (Direction::BobToAlice, 0x06),
        (Direction::AliceToBob, 0x07),
        (Direction::BobToAlice, 0x08),
        (Direction::AliceToBob, 0x09),
        (Direction::BobToAlice, 0x0a),
    ];
    let sequence_ok = msgs.len() == expected.len()
        && msgs
            .iter()
            .zip(&expected)
            .all(|((dir, msg), &(want_dir, want_tag))| *dir == want_dir && msg.tag() == want_tag);
    if !sequence_ok {
        return Err(WireError::Malformed(
            "transcript does not follow the complete-session sequence".into(),
        ));
    }

    let mut sifted_z = 0u64;
    let mut sample_bits = 0u64;
    let mut grant_bits = 0u64;
    let mut tag_bits = 0u8;
    let mut pa_length = 0u64;
    let mut detections: Vec<(u64, Basis)> = Vec::new();
    for (_, msg) in &msgs {
        match msg {
            Message::DetectionReport {
                detections: list, ..
            } => detections = list.clone(),
            Message::BasisReveal { pulses } => {
                sifted_z = pulses
                    .iter()
                    .zip(&detections)
                    .filter(|&(&(basis, _), &(_, det))| basis == Basis::Z && det == Basis::Z)
                    .count() as u64;
            }
            Message::CheckReport { z_sample, .. } => sample_bits = z_sample.len() as u64,
            Message::Reconcile { grant, .. } => grant_bits = grant.len() as u64,
            Message::TagExchange { tag_bits: b, .. } => tag_bits = *b,
            Message::PaSeed { key_length, .. } => pa_length = *key_length,
            _ => {}
        }
    }

    let counts_consistent = sample_bits + grant_bits == sifted_z;
    let nominal_tag = (tag_width(config.eps_cor) as u64).min(grant_bits.max(1)) as u8;
    let tag_width_ok = tag_bits == nominal_tag;
    let pa_length_ok = pa_length <= report.key_length && pa_length <= grant_bits;
    let disclosed = sample_bits as f64 + report.lambda_ec + tag_bits as f64;
    let allowance = sample_bits as f64 + report.lambda_ec + nominal_tag as f64;
    let disclosure_within_budget = disclosed <= allowance;

    Ok(TranscriptAudit {
        sequence_ok,
        sifted_z,
        sample_bits,
        grant_bits,
        tag_bits,
        modeled_ec_bits: report.lambda_ec,
        counts_consistent,
        tag_width_ok,
        pa_length_ok,
        disclosure_within_budget,
    })
}
