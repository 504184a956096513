//! Canonical wire encoding for the session protocol.
//!
//! Every message is one frame: a `u8` type tag, a `u32` little-endian
//! payload length, then the payload. All integers are little-endian; bit
//! strings travel as a `u64` bit count plus LSB-first packed bytes with
//! zero padding. Parsing is strict — any spare payload byte, out-of-range
//! enum value, or non-canonical padding is rejected — so
//! `parse(serialize(m)) = m` and every byte string either parses or
//! returns an error, never panics.

use crate::bits::BitString;
use crate::records::Intensity;
use thiserror::Error;
use timebin_core::Basis;

/// Version byte carried in `Hello`; bumped on any wire-format change.
pub const PROTOCOL_VERSION: u8 = 1;

/// Upper bound on a frame payload, limiting attacker-controlled allocation.
pub const MAX_PAYLOAD: u32 = 1 << 30;

/// Machine-readable cause carried by an `Abort` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbortReason {
    /// Correctness check failed: the tag comparison exposed key disagreement.
    Correctness,
    /// The finite-key bound yielded zero extractable bits.
    NoKey,
    /// Transport, handshake, or protocol-consistency failure.
    Channel,
}

impl AbortReason {
    fn code(self) -> u8 {
        match self {
            AbortReason::Correctness => 1,
            AbortReason::NoKey => 2,
            AbortReason::Channel => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(AbortReason::Correctness),
            2 => Some(AbortReason::NoKey),
            3 => Some(AbortReason::Channel),
            _ => None,
        }
    }
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AbortReason::Correctness => "correctness failure",
            AbortReason::NoKey => "no extractable key",
            AbortReason::Channel => "channel",
        })
    }
}

/// Session protocol messages, in their nominal exchange order.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Alice → Bob: opens the session and surfaces the deterministic seed.
    Hello {
        version: u8,
        session_seed: u64,
        sample_permille: u16,
        config_digest: u64,
    },
    /// Bob → Alice: slots that produced a detection and the basis measured.
    DetectionReport {
        emitted_slots: u64,
        detections: Vec<(u64, Basis)>,
    },
    /// Alice → Bob: preparation basis and intensity per reported slot,
    /// aligned with the detection report; key bits are withheld.
    BasisReveal { pulses: Vec<(Basis, Intensity)> },
    /// Bob → Alice: X-basis tallies and outcomes, plus his measured bits on
    /// the disclosed Z sample.
    CheckReport {
        x_errors_mu1: u64,
        x_errors_mu2: u64,
        x_outcomes: Vec<(u64, u8)>,
        z_sample: Vec<(u64, u8)>,
    },
    /// Alice → Bob: sample error tallies and the modeled-reconciliation
    /// grant of her kept key bits.
    Reconcile {
        sample_errors_mu1: u64,
        sample_errors_mu2: u64,
        grant: BitString,
    },
    /// Bob → Alice: errors he found in his kept set against the grant.
    CountsAck {
        kept_errors_mu1: u64,
        kept_errors_mu2: u64,
    },
    /// Alice → Bob: seed and value of her correctness tag.
    TagExchange {
        tag_seed: u64,
        tag_bits: u8,
        tag: u64,
    },
    /// Bob → Alice: whether his tag matches.
    TagVerdict { ok: bool },
    /// Alice → Bob: final key length and privacy-amplification seed.
    PaSeed { key_length: u64, pa_seed: u64 },
    /// Bob → Alice: session complete on his side.
    Finished,
    /// Either direction: terminates the session with a reason.
    Abort { reason: AbortReason, detail: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::DetectionReport { .. } => 0x02,
            Message::BasisReveal { .. } => 0x03,
            Message::CheckReport { .. } => 0x04,
            Message::Reconcile { .. } => 0x05,
            Message::CountsAck { .. } => 0x06,
            Message::TagExchange { .. } => 0x07,
            Message::TagVerdict { .. } => 0x08,
            Message::PaSeed { .. } => 0x09,
            Message::Finished => 0x0a,
            Message::Abort { .. } => 0x0f,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    /// Frame header or body ends before its declared length.
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("payload length {0} exceeds limit {MAX_PAYLOAD}")]
    Overflow(u32),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn basis_code(b: Basis) -> u8 {
    match b {
        Basis::Z => 0,
        Basis::X => 1,
    }
}

/// Encodes one message as a complete frame.
pub fn serialize_message(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello {
            version,
            session_seed,
            sample_permille,
            config_digest,
        } => {
            payload.push(*version);
            put_u64(&mut payload, *session_seed);
            put_u16(&mut payload, *sample_permille);
            put_u64(&mut payload, *config_digest);
        }
        Message::DetectionReport {
            emitted_slots,
            detections,
        } => {
            put_u64(&mut payload, *emitted_slots);
            put_u32(&mut payload, detections.len() as u32);
            for &(slot, basis) in detections {
                put_u64(&mut payload, slot);
                payload.push(basis_code(basis));
            }
        }
        Message::BasisReveal { pulses } => {
            put_u32(&mut payload, pulses.len() as u32);
            for &(basis, intensity) in pulses {
                payload.push(basis_code(basis));
                payload.push(intensity.index() as u8);
            }
        }
        Message::CheckReport {
            x_errors_mu1,
            x_errors_mu2,
            x_outcomes,
            z_sample,
        } => {
            put_u64(&mut payload, *x_errors_mu1);
            put_u64(&mut payload, *x_errors_mu2);
            for list in [x_outcomes, z_sample] {
                put_u32(&mut payload, list.len() as u32);
                for &(slot, bit) in list {
                    put_u64(&mut payload, slot);
                    payload.push(bit);
                }
            }
        }
        Message::Reconcile {
            sample_errors_mu1,
            sample_errors_mu2,
            grant,
        } => {
            put_u64(&mut payload, *sample_errors_mu1);
            put_u64(&mut payload, *sample_errors_mu2);
            put_u64(&mut payload, grant.len() as u64);
            payload.extend_from_slice(&grant.to_bytes());
        }
        Message::CountsAck {
            kept_errors_mu1,
            kept_errors_mu2,
        } => {
            put_u64(&mut payload, *kept_errors_mu1);
            put_u64(&mut payload, *kept_errors_mu2);
        }
        Message::TagExchange {
            tag_seed,
            tag_bits,
            tag,
        } => {
            put_u64(&mut payload, *tag_seed);
            payload.push(*tag_bits);
            put_u64(&mut payload, *tag);
        }
        Message::TagVerdict { ok } => payload.push(*ok as u8),
        Message::PaSeed {
            key_length,
            pa_seed,
        } => {
            put_u64(&mut payload, *key_length);
            put_u64(&mut payload, *pa_seed);
        }
        Message::Finished => {}
        Message::Abort { reason, detail } => {
            payload.push(reason.code());
            put_u32(&mut payload, detail.len() as u32);
            payload.extend_from_slice(detail.as_bytes());
        }
    }

    assert!(
        payload.len() <= MAX_PAYLOAD as usize,
        "payload exceeds frame limit"
    );
    let mut frame = Vec::with_capacity(5 + payload.len());
    frame.push(msg.tag());
    put_u32(&mut frame, payload.len() as u32);
    frame.extend_from_slice(&payload);
    frame
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Malformed(format!(
                "payload ends early: need {n} more bytes, have {}",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn basis(&mut self) -> Result<Basis, WireError> {
        match self.u8()? {
            0 => Ok(Basis::Z),
            1 => Ok(Basis::X),
            b => Err(WireError::Malformed(format!("invalid basis byte {b}"))),
        }
    }

    fn bit(&mut self) -> Result<u8, WireError> {
        match self.u8()? {
            b @ (0 | 1) => Ok(b),
            b => Err(WireError::Malformed(format!("invalid bit byte {b}"))),
        }
    }

    /// Element count for a list whose entries occupy `elem_size` bytes;
    /// checked against the remaining payload before any allocation.
    fn count(&mut self, elem_size: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.checked_mul(elem_size).is_none_or(|need| need > self.remaining()) {
            return Err(WireError::Malformed(format!(
                "list of {n} x {elem_size} bytes exceeds payload"
            )));
        }
        Ok(n)
    }

    fn finish(self) -> Result<(), WireError> {
        if self.remaining() != 0 {
            return Err(WireError::Malformed(format!(
                "{} trailing payload bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed. Extra bytes after the frame are left for
/// the caller (stream framing).
pub fn parse_message(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < 5 {
        return Err(WireError::Truncated {
            needed: 5,
            have: bytes.len(),
        });
    }
    let tag = bytes[0];
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(WireError::Overflow(len));
    }
    let total = 5 + len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let mut rd = Reader::new(&bytes[5..total]);

    let msg = match tag {
        0x01 => Message::Hello {
            version: rd.u8()?,
            session_seed: rd.u64()?,
            sample_permille: rd.u16()?,
            config_digest: rd.u64()?,
        },
        0x02 => {
            let emitted_slots = rd.u64()?;
            let n = rd.count(9)?;
            let mut detections = Vec::with_capacity(n);
            for _ in 0..n {
                detections.push((rd.u64()?, rd.basis()?));
            }
            Message::DetectionReport {
                emitted_slots,
                detections,
            }
        }
        0x03 => {
            let n = rd.count(2)?;
            let mut pulses = Vec::with_capacity(n);
            for _ in 0..n {
                let basis = rd.basis()?;
                let intensity = Intensity::from_index(rd.u8()? as usize).ok_or_else(|| {
                    WireError::Malformed("invalid intensity byte".into())
                })?;
                pulses.push((basis, intensity));
            }
            Message::BasisReveal { pulses }
        }
        0x04 => {
            let x_errors_mu1 = rd.u64()?;
            let x_errors_mu2 = rd.u64()?;
            let mut lists = [Vec::new(), Vec::new()];
            for list in &mut lists {
                let n = rd.count(9)?;
                list.reserve(n);
                for _ in 0..n {
                    list.push((rd.u64()?, rd.bit()?));
                }
            }
            let [x_outcomes, z_sample] = lists;
            Message::CheckReport {
                x_errors_mu1,
                x_errors_mu2,
                x_outcomes,
                z_sample,
            }
        }
        0x05 => {
            let sample_errors_mu1 = rd.u64()?;
            let sample_errors_mu2 = rd.u64()?;
            let bits = rd.u64()?;
            let nbytes = usize::try_from(bits.div_ceil(8))
                .map_err(|_| WireError::Malformed("grant length overflow".into()))?;
            let raw = rd.take(nbytes)?;
            let grant = BitString::from_bytes(raw, bits as usize).ok_or_else(|| {
                WireError::Malformed("non-canonical grant padding".into())
            })?;
            Message::Reconcile {
                sample_errors_mu1,
                sample_errors_mu2,
                grant,
            }
        }
        0x06 => Message::CountsAck {
            kept_errors_mu1: rd.u64()?,
            kept_errors_mu2: rd.u64()?,
        },
        0x07 => {
            let tag_seed = rd.u64()?;
            let tag_bits = rd.u8()?;
            let tag = rd.u64()?;
            if tag_bits == 0 || tag_bits > 64 {
                return Err(WireError::Malformed(format!(
                    "tag width {tag_bits} not in 1..=64"
                )));
            }
            if tag_bits < 64 && tag >> tag_bits != 0 {
                return Err(WireError::Malformed(
                    "tag value wider than declared width".into(),
                ));
            }
            Message::TagExchange {
                tag_seed,
                tag_bits,
                tag,
            }
        }
        0x08 => Message::TagVerdict {
            ok: rd.bit()? == 1,
        },
        0x09 => Message::PaSeed {
            key_length: rd.u64()?,
            pa_seed: rd.u64()?,
        },
        0x0a => Message::Finished,
        0x0f => {
            let reason = AbortReason::from_code(rd.u8()?)
                .ok_or_else(|| WireError::Malformed("invalid abort reason".into()))?;
            let n = rd.count(1)?;
            let detail = std::str::from_utf8(rd.take(n)?)
                .map_err(|_| WireError::Malformed("abort detail is not UTF-8".into()))?
                .to_owned();
            Message::Abort { reason, detail }
        }
        other => return Err(WireError::UnknownTag(other)),
    };

    rd.finish()?;
    Ok((msg, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_trip(msg: &Message) {
        let frame = serialize_message(msg);
        let (back, used) = parse_message(&frame).expect("round trip parse");
        assert_eq!(used, frame.len());
        assert_eq!(&back, msg);
        // Stream framing: trailing bytes belong to the next frame.
        let mut two = frame.clone();
        two.extend_from_slice(&frame);
        let (first, used) = parse_message(&two).unwrap();
        assert_eq!(&first, msg);
        assert_eq!(used, frame.len());
    }

    #[test]
    fn every_message_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grant = crate::bits::BitString::random(&mut rng, 173);
        let msgs = [
            Message::Hello {
                version: PROTOCOL_VERSION,
                session_seed: 0x0123_4567_89ab_cdef,
                sample_permille: 20,
                config_digest: 42,
            },
            Message::DetectionReport {
                emitted_slots: 1 << 40,
                detections: vec![(3, Basis::Z), (17, Basis::X), (1 << 39, Basis::Z)],
            },
            Message::DetectionReport {
                emitted_slots: 0,
                detections: vec![],
            },
            Message::BasisReveal {
                pulses: vec![
                    (Basis::Z, Intensity::Mu1),
                    (Basis::X, Intensity::Mu2),
                    (Basis::Z, Intensity::Mu2),
                ],
            },
            Message::CheckReport {
                x_errors_mu1: 5,
                x_errors_mu2: 0,
                x_outcomes: vec![(17, 1), (40, 0)],
                z_sample: vec![(3, 0)],
            },
            Message::Reconcile {
                sample_errors_mu1: 9,
                sample_errors_mu2: 1,
                grant,
            },
            Message::CountsAck {
                kept_errors_mu1: 12,
                kept_errors_mu2: 3,
            },
            Message::TagExchange {
                tag_seed: 7,
                tag_bits: 31,
                tag: (1 << 31) - 1,
            },
            Message::TagVerdict { ok: true },
            Message::TagVerdict { ok: false },
            Message::PaSeed {
                key_length: 76441,
                pa_seed: 99,
            },
            Message::Finished,
            Message::Abort {
                reason: AbortReason::NoKey,
                detail: "qber_too_high".into(),
            },
        ];
        for msg in &msgs {
            round_trip(msg);
        }
    }

    #[test]
    fn random_payload_lists_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let n = rng.gen_range(0..200);
            let mut slot = 0u64;
            let detections: Vec<(u64, Basis)> = (0..n)
                .map(|_| {
                    slot += rng.gen_range(1..100);
                    (
                        slot,
                        if rng.gen_bool(0.5) { Basis::Z } else { Basis::X },
                    )
                })
                .collect();
            round_trip(&Message::DetectionReport {
                emitted_slots: slot + 1,
                detections,
            });
            let grant_len = rng.gen_range(0..500);
            let grant = crate::bits::BitString::random(&mut rng, grant_len);
            round_trip(&Message::Reconcile {
                sample_errors_mu1: rng.gen(),
                sample_errors_mu2: rng.gen(),
                grant,
            });
        }
    }

    #[test]
    fn empty_payload_message_is_five_bytes() {
        let frame = serialize_message(&Message::Finished);
        assert_eq!(frame, vec![0x0a, 0, 0, 0, 0]);
    }

    #[test]
    fn truncation_unknown_tag_and_overflow_error() {
        let frame = serialize_message(&Message::TagVerdict { ok: true });
        for cut in 0..frame.len() {
            assert!(matches!(
                parse_message(&frame[..cut]),
                Err(WireError::Truncated { .. })
            ));
        }
        assert_eq!(
            parse_message(&[0x77, 0, 0, 0, 0]),
            Err(WireError::UnknownTag(0x77))
        );
        let mut bad = vec![0x0a];
        bad.extend_from_slice(&(MAX_PAYLOAD + 1).to_le_bytes());
        assert_eq!(parse_message(&bad), Err(WireError::Overflow(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn structural_garbage_is_malformed() {
        // Trailing payload byte.
        let frame = vec![0x0a, 1, 0, 0, 0, 0xff];
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
        // Basis byte out of range.
        let msg = Message::DetectionReport {
            emitted_slots: 1,
            detections: vec![(0, Basis::Z)],
        };
        let mut frame = serialize_message(&msg);
        let last = frame.len() - 1;
        frame[last] = 9;
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
        // List count pointing past the payload.
        let mut frame = vec![0x02, 13, 0, 0, 0];
        frame.extend_from_slice(&0u64.to_le_bytes());
        frame.extend_from_slice(&u32::MAX.to_le_bytes());
        frame.push(0);
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
        // Non-canonical grant padding.
        let msg = Message::Reconcile {
            sample_errors_mu1: 0,
            sample_errors_mu2: 0,
            grant: crate::bits::BitString::from_fn(3, |_| true),
        };
        let mut frame = serialize_message(&msg);
        let last = frame.len() - 1;
        frame[last] = 0xff;
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
        // Oversized tag value for its declared width.
        let msg = Message::TagExchange {
            tag_seed: 0,
            tag_bits: 8,
            tag: 0x1ff,
        };
        let frame = serialize_message(&msg);
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
        // Invalid UTF-8 abort detail.
        let mut frame = serialize_message(&Message::Abort {
            reason: AbortReason::Channel,
            detail: "xx".into(),
        });
        let last = frame.len() - 1;
        frame[last] = 0xff;
        assert!(matches!(parse_message(&frame), Err(WireError::Malformed(_))));
    }

    #[test]
    fn fuzzed_frames_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut parsed = 0u32;
        for _ in 0..100_000 {
            let len = rng.gen_range(0..64);
            let mut bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            // Half the time, aim at real tags with a sane declared length so
            // the payload decoders actually run.
            if !bytes.is_empty() && rng.gen_bool(0.5) {
                let tags = [1u8, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15];
                bytes[0] = tags[rng.gen_range(0..tags.len())];
                if bytes.len() >= 5 {
                    let declared = (bytes.len() - 5) as u32;
                    bytes[1..5].copy_from_slice(&declared.to_le_bytes());
                }
            }
            if parse_message(&bytes).is_ok() {
                parsed += 1;
            }
        }
        assert!(parsed > 0, "fuzz never produced a valid frame");
    }
}
