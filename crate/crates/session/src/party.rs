//! Alice and Bob as deterministic single-threaded state machines.
//!
//! Each handler consumes exactly one peer message and produces the reply,
//! so a party can be driven by any transport without shared state. All
//! randomness derives from the session seed surfaced in `Hello`: Alice's
//! pulse choices, the QBER sample, the tag seed, and the PA seed are
//! per-purpose splits of it, which makes transcripts bit-reproducible.
//! The classical channel is assumed authenticated; no MAC is modeled.

use crate::bits::BitString;
use crate::records::{
    alice_choice, in_sample, realize_detections, sift, DetectionRecord, PulseRecord, SEED_ALICE,
    SEED_PA, SEED_SAMPLE, SEED_TAG,
};
use crate::toeplitz::toeplitz_hash;
use crate::wire::{AbortReason, Message, PROTOCOL_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use timebin_core::channel::{split_seed, DEFAULT_PULSE_BUDGET};
use timebin_core::{secret_key_length, Basis, BlockCounts, KeyLengthReport, LinkModel, ProtocolConfig};

/// The peer broke the protocol contract (wrong message, inconsistent
/// contents, out-of-order state). Drivers translate this into a channel
/// abort.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("protocol violation: {0}")]
pub struct ProtocolViolation(pub String);

/// Session-level knobs that are not physics: block override, sample
/// fraction, slot budget, and the test hook that corrupts Bob's corrected
/// key between reconciliation and the tag check.
#[derive(Clone, Debug)]
pub struct SessionPolicy {
    /// Sifted Z-detections to accumulate; `None` uses `config.block_size`.
    pub block_size: Option<u64>,
    /// Fraction of sifted Z bits disclosed for QBER estimation, in permille.
    pub sample_permille: u16,
    /// Emitted-slot budget before Bob declares the block unreachable.
    pub slot_budget: u64,
    /// Test hook: Bob flips this kept-key bit (mod length) after
    /// reconciliation, so the correctness tag must catch it.
    pub tamper_kept_bit: Option<u64>,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        Self {
            block_size: None,
            sample_permille: 20,
            slot_budget: DEFAULT_PULSE_BUDGET as u64,
            tamper_kept_bit: None,
        }
    }
}

/// FNV-1a digest of the protocol parameters, exchanged in `Hello` so the
/// parties cannot silently run with diverging configurations.
pub fn config_digest(config: &ProtocolConfig) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for f in [
        config.pulse_rate,
        config.p_z_alice,
        config.p_x_alice,
        config.mu1,
        config.mu2,
        config.p_mu1,
        config.p_mu2,
        config.eps_sec,
        config.eps_cor,
        config.f_ec,
    ] {
        eat(&f.to_bits().to_le_bytes());
    }
    eat(&config.block_size.to_le_bytes());
    h
}

/// Correctness-tag width ⌈log₂(2/ε_cor)⌉ in bits, clamped to a `u64` tag.
pub fn tag_width(eps_cor: f64) -> u8 {
    let bits = (2.0 / eps_cor).log2().ceil();
    bits.clamp(1.0, 64.0) as u8
}

fn hash_seed_bits(seed: u64, nbits: usize) -> BitString {
    BitString::random(&mut ChaCha8Rng::seed_from_u64(seed), nbits)
}

fn tag_of(key: &BitString, tag_seed: u64, tag_bits: u8) -> u64 {
    let seed = hash_seed_bits(tag_seed, key.len() + tag_bits as usize - 1);
    toeplitz_hash(key, &seed, tag_bits as usize)
        .expect("tag dimensions validated by caller")
        .low_word()
}

fn pa_extract(key: &BitString, pa_seed: u64, out_len: usize) -> BitString {
    let seed = hash_seed_bits(pa_seed, key.len() + out_len - 1);
    toeplitz_hash(key, &seed, out_len).expect("pa dimensions validated by caller")
}

/// Sifted-Z bookkeeping common to both sides: slot, local bit, intensity.
#[derive(Clone, Copy, Debug)]
struct ZEntry {
    slot: u64,
    bit: u8,
    mu: usize,
}

fn assemble_counts(
    config: &ProtocolConfig,
    emitted_slots: u64,
    n_z: [u64; 2],
    m_z: [u64; 2],
    n_x: [u64; 2],
    m_x: [u64; 2],
) -> BlockCounts {
    let pulses = |basis: Basis, mu: usize| {
        let p_basis = match basis {
            Basis::Z => config.p_z_alice,
            Basis::X => config.p_x_alice,
        };
        let p_mu = [config.p_mu1, config.p_mu2][mu];
        emitted_slots as f64 * p_basis * p_mu
    };
    BlockCounts {
        n_z_mu1: n_z[0] as f64,
        n_z_mu2: n_z[1] as f64,
        m_z_mu1: m_z[0] as f64,
        m_z_mu2: m_z[1] as f64,
        n_x_mu1: n_x[0] as f64,
        n_x_mu2: n_x[1] as f64,
        m_x_mu1: m_x[0] as f64,
        m_x_mu2: m_x[1] as f64,
        pulses_z_mu1: pulses(Basis::Z, 0),
        pulses_z_mu2: pulses(Basis::Z, 1),
        pulses_x_mu1: pulses(Basis::X, 0),
        pulses_x_mu2: pulses(Basis::X, 1),
        elapsed_time: emitted_slots as f64 / config.pulse_rate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AliceState {
    Start,
    AwaitReport,
    AwaitCheck,
    AwaitAck,
    AwaitVerdict,
    AwaitFinished,
    Done,
    Aborted,
}

/// Transmitter-side party.
pub struct Alice {
    config: ProtocolConfig,
    policy: SessionPolicy,
    session_seed: u64,
    alice_seed: u64,
    sample_seed: u64,
    state: AliceState,
    emitted_slots: u64,
    records: Vec<PulseRecord>,
    z_entries: Vec<ZEntry>,
    x_entries: Vec<(u64, usize)>,
    sample: Vec<ZEntry>,
    kept: Vec<ZEntry>,
    kept_bits: BitString,
    n_z: [u64; 2],
    n_x: [u64; 2],
    m_x: [u64; 2],
    sample_err: [u64; 2],
    report: Option<KeyLengthReport>,
    final_len: usize,
    final_key: Option<BitString>,
}

impl Alice {
    pub fn new(config: ProtocolConfig, policy: SessionPolicy, session_seed: u64) -> Self {
        assert!(
            policy.sample_permille < 1000,
            "sample_permille must leave key material"
        );
        Self {
            alice_seed: split_seed(session_seed, SEED_ALICE),
            sample_seed: split_seed(session_seed, SEED_SAMPLE),
            config,
            policy,
            session_seed,
            state: AliceState::Start,
            emitted_slots: 0,
            records: Vec::new(),
            z_entries: Vec::new(),
            x_entries: Vec::new(),
            sample: Vec::new(),
            kept: Vec::new(),
            kept_bits: BitString::new(),
            n_z: [0; 2],
            n_x: [0; 2],
            m_x: [0; 2],
            sample_err: [0; 2],
            report: None,
            final_len: 0,
            final_key: None,
        }
    }

    /// Opens the session.
    pub fn hello(&mut self) -> Result<Message, ProtocolViolation> {
        self.expect(AliceState::Start, "hello")?;
        self.state = AliceState::AwaitReport;
        Ok(Message::Hello {
            version: PROTOCOL_VERSION,
            session_seed: self.session_seed,
            sample_permille: self.policy.sample_permille,
            config_digest: config_digest(&self.config),
        })
    }

    /// Consumes Bob's detection report, re-derives her pulse records for the
    /// reported slots, sifts, and reveals basis + intensity (bits withheld).
    pub fn on_detection_report(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(AliceState::AwaitReport, "detection report")?;
        let Message::DetectionReport {
            emitted_slots,
            detections,
        } = msg
        else {
            return Err(unexpected("DetectionReport", &msg));
        };
        if let Some(&(last, _)) = detections.last() {
            if last >= emitted_slots {
                return Err(ProtocolViolation(format!(
                    "reported slot {last} beyond emitted count {emitted_slots}"
                )));
            }
        }
        self.records = detections
            .iter()
            .map(|&(slot, _)| alice_choice(self.alice_seed, slot, &self.config))
            .collect();
        let outcome =
            sift(&self.records, &detections).map_err(|e| ProtocolViolation(e.to_string()))?;

        for (rec, &(_, bob_basis)) in self.records.iter().zip(&detections) {
            if rec.basis != bob_basis {
                continue;
            }
            let mu = rec.intensity.index();
            match rec.basis {
                Basis::Z => {
                    self.n_z[mu] += 1;
                    self.z_entries.push(ZEntry {
                        slot: rec.slot_index,
                        bit: rec.bit.unwrap_or(0),
                        mu,
                    });
                }
                Basis::X => {
                    self.n_x[mu] += 1;
                    self.x_entries.push((rec.slot_index, mu));
                }
            }
        }
        debug_assert_eq!(outcome.z_slots.len(), self.z_entries.len());
        debug_assert_eq!(outcome.x_slots.len(), self.x_entries.len());

        for e in &self.z_entries {
            if in_sample(self.sample_seed, e.slot, self.policy.sample_permille) {
                self.sample.push(*e);
            } else {
                self.kept.push(*e);
            }
        }
        self.kept_bits = self.kept.iter().map(|e| e.bit == 1).collect();
        self.emitted_slots = emitted_slots;
        self.state = AliceState::AwaitCheck;
        Ok(Message::BasisReveal {
            pulses: self
                .records
                .iter()
                .map(|r| (r.basis, r.intensity))
                .collect(),
        })
    }

    /// Consumes Bob's X outcomes and Z sample, tallies errors, and grants
    /// the kept key for modeled reconciliation.
    pub fn on_check_report(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(AliceState::AwaitCheck, "check report")?;
        let Message::CheckReport {
            x_errors_mu1,
            x_errors_mu2,
            x_outcomes,
            z_sample,
        } = msg
        else {
            return Err(unexpected("CheckReport", &msg));
        };
        if x_outcomes.len() != self.x_entries.len() {
            return Err(ProtocolViolation(format!(
                "x outcome count {} != sifted X count {}",
                x_outcomes.len(),
                self.x_entries.len()
            )));
        }
        for (&(slot, flag), &(want, mu)) in x_outcomes.iter().zip(&self.x_entries) {
            if slot != want {
                return Err(ProtocolViolation(format!(
                    "x outcome slot {slot} does not match sifted slot {want}"
                )));
            }
            self.m_x[mu] += flag as u64;
        }
        if [x_errors_mu1, x_errors_mu2] != self.m_x {
            return Err(ProtocolViolation(
                "x error tallies disagree with x outcomes".into(),
            ));
        }
        if z_sample.len() != self.sample.len() {
            return Err(ProtocolViolation(format!(
                "z sample count {} != expected {}",
                z_sample.len(),
                self.sample.len()
            )));
        }
        for (&(slot, bob_bit), e) in z_sample.iter().zip(&self.sample) {
            if slot != e.slot {
                return Err(ProtocolViolation(format!(
                    "z sample slot {slot} not in the agreed sample"
                )));
            }
            if bob_bit != e.bit {
                self.sample_err[e.mu] += 1;
            }
        }
        self.state = AliceState::AwaitAck;
        Ok(Message::Reconcile {
            sample_errors_mu1: self.sample_err[0],
            sample_errors_mu2: self.sample_err[1],
            grant: self.kept_bits.clone(),
        })
    }

    /// Completes the error tallies, evaluates the finite-key bound, and
    /// either opens the correctness check or aborts with `no extractable key`.
    pub fn on_counts_ack(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(AliceState::AwaitAck, "counts ack")?;
        let Message::CountsAck {
            kept_errors_mu1,
            kept_errors_mu2,
        } = msg
        else {
            return Err(unexpected("CountsAck", &msg));
        };
        let m_z = [
            self.sample_err[0] + kept_errors_mu1,
            self.sample_err[1] + kept_errors_mu2,
        ];
        let counts = assemble_counts(
            &self.config,
            self.emitted_slots,
            self.n_z,
            m_z,
            self.n_x,
            self.m_x,
        );
        let report = secret_key_length(&counts, &self.config)
            .map_err(|e| ProtocolViolation(format!("finite-key evaluation failed: {e}")))?;
        self.final_len = (report.key_length as usize).min(self.kept_bits.len());
        let zero_reason = report.zero_reason;
        self.report = Some(report);
        if self.final_len == 0 {
            self.state = AliceState::Aborted;
            let detail = zero_reason
                .map(|r| r.to_string())
                .unwrap_or_else(|| "kept set empty".into());
            return Ok(Message::Abort {
                reason: AbortReason::NoKey,
                detail,
            });
        }
        let tag_bits = (tag_width(self.config.eps_cor) as usize).min(self.kept_bits.len()) as u8;
        self.state = AliceState::AwaitVerdict;
        let tag_seed = split_seed(self.session_seed, SEED_TAG);
        Ok(Message::TagExchange {
            tag_seed,
            tag_bits,
            tag: tag_of(&self.kept_bits, tag_seed, tag_bits),
        })
    }

    /// Reacts to Bob's tag verdict: a match releases the PA seed, a mismatch
    /// aborts for correctness.
    pub fn on_tag_verdict(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(AliceState::AwaitVerdict, "tag verdict")?;
        let Message::TagVerdict { ok } = msg else {
            return Err(unexpected("TagVerdict", &msg));
        };
        if !ok {
            self.state = AliceState::Aborted;
            return Ok(Message::Abort {
                reason: AbortReason::Correctness,
                detail: "correctness tags disagree".into(),
            });
        }
        let pa_seed = split_seed(self.session_seed, SEED_PA);
        self.final_key = Some(pa_extract(&self.kept_bits, pa_seed, self.final_len));
        self.state = AliceState::AwaitFinished;
        Ok(Message::PaSeed {
            key_length: self.final_len as u64,
            pa_seed,
        })
    }

    pub fn on_finished(&mut self, msg: Message) -> Result<(), ProtocolViolation> {
        self.expect(AliceState::AwaitFinished, "finished")?;
        let Message::Finished = msg else {
            return Err(unexpected("Finished", &msg));
        };
        self.state = AliceState::Done;
        Ok(())
    }

    pub fn final_key(&self) -> Option<&BitString> {
        self.final_key.as_ref()
    }

    pub fn report(&self) -> Option<&KeyLengthReport> {
        self.report.as_ref()
    }

    /// Final key length after the kept-set clamp, bits.
    pub fn final_len(&self) -> usize {
        self.final_len
    }

    fn expect(&self, want: AliceState, what: &str) -> Result<(), ProtocolViolation> {
        if self.state != want {
            return Err(ProtocolViolation(format!(
                "{what} not valid in state {:?}",
                self.state
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BobState {
    Start,
    AwaitReveal,
    AwaitReconcile,
    AwaitTag,
    AwaitPa,
    Done,
    Aborted,
}

/// Receiver-side party. Owns the link model: the detection stream is
/// realized locally when `Hello` arrives.
pub struct Bob {
    config: ProtocolConfig,
    link: LinkModel,
    policy: SessionPolicy,
    state: BobState,
    session_seed: u64,
    sample_permille: u16,
    detections: Vec<DetectionRecord>,
    emitted_slots: u64,
    x_entries: Vec<(u64, u8, usize)>,
    sample: Vec<ZEntry>,
    kept: Vec<ZEntry>,
    corrected: BitString,
    n_z: [u64; 2],
    n_x: [u64; 2],
    m_x: [u64; 2],
    kept_err: [u64; 2],
    report: Option<KeyLengthReport>,
    final_key: Option<BitString>,
}

impl Bob {
    pub fn new(config: ProtocolConfig, link: LinkModel, policy: SessionPolicy) -> Self {
        Self {
            config,
            link,
            policy,
            state: BobState::Start,
            session_seed: 0,
            sample_permille: 0,
            detections: Vec::new(),
            emitted_slots: 0,
            x_entries: Vec::new(),
            sample: Vec::new(),
            kept: Vec::new(),
            corrected: BitString::new(),
            n_z: [0; 2],
            n_x: [0; 2],
            m_x: [0; 2],
            kept_err: [0; 2],
            report: None,
            final_key: None,
        }
    }

    /// Validates the handshake, realizes the detection stream for one block,
    /// and reports the detected slots.
    pub fn on_hello(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(BobState::Start, "hello")?;
        let Message::Hello {
            version,
            session_seed,
            sample_permille,
            config_digest: digest,
        } = msg
        else {
            return Err(unexpected("Hello", &msg));
        };
        if version != PROTOCOL_VERSION {
            self.state = BobState::Aborted;
            return Ok(Message::Abort {
                reason: AbortReason::Channel,
                detail: format!("protocol version {version} != {PROTOCOL_VERSION}"),
            });
        }
        if digest != config_digest(&self.config) {
            self.state = BobState::Aborted;
            return Ok(Message::Abort {
                reason: AbortReason::Channel,
                detail: "configuration digests disagree".into(),
            });
        }
        if sample_permille >= 1000 {
            self.state = BobState::Aborted;
            return Ok(Message::Abort {
                reason: AbortReason::Channel,
                detail: format!("sample permille {sample_permille} out of range"),
            });
        }
        self.session_seed = session_seed;
        self.sample_permille = sample_permille;

        let block = self.policy.block_size.unwrap_or(self.config.block_size);
        let target = (block as f64 / self.config.p_z_alice).ceil() as u64;
        match realize_detections(
            &self.config,
            &self.link,
            session_seed,
            target,
            self.policy.slot_budget,
        ) {
            Ok((detections, emitted_slots)) => {
                let report = detections
                    .iter()
                    .map(|d| (d.slot_index, d.basis))
                    .collect();
                self.detections = detections;
                self.emitted_slots = emitted_slots;
                self.state = BobState::AwaitReveal;
                Ok(Message::DetectionReport {
                    emitted_slots,
                    detections: report,
                })
            }
            Err(e) => {
                self.state = BobState::Aborted;
                Ok(Message::Abort {
                    reason: AbortReason::Channel,
                    detail: e.to_string(),
                })
            }
        }
    }

    /// Sifts against Alice's revealed bases and discloses the X outcomes
    /// plus the agreed Z sample.
    pub fn on_basis_reveal(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(BobState::AwaitReveal, "basis reveal")?;
        let Message::BasisReveal { pulses } = msg else {
            return Err(unexpected("BasisReveal", &msg));
        };
        if pulses.len() != self.detections.len() {
            return Err(ProtocolViolation(format!(
                "reveal covers {} slots, reported {}",
                pulses.len(),
                self.detections.len()
            )));
        }
        let sample_seed = split_seed(self.session_seed, SEED_SAMPLE);
        for (det, &(alice_basis, intensity)) in self.detections.iter().zip(&pulses) {
            if det.basis != alice_basis {
                continue;
            }
            let mu = intensity.index();
            match det.basis {
                Basis::Z => {
                    self.n_z[mu] += 1;
                    let e = ZEntry {
                        slot: det.slot_index,
                        bit: det.outcome,
                        mu,
                    };
                    if in_sample(sample_seed, e.slot, self.sample_permille) {
                        self.sample.push(e);
                    } else {
                        self.kept.push(e);
                    }
                }
                Basis::X => {
                    self.n_x[mu] += 1;
                    self.m_x[mu] += det.outcome as u64;
                    self.x_entries.push((det.slot_index, det.outcome, mu));
                }
            }
        }
        self.state = BobState::AwaitReconcile;
        Ok(Message::CheckReport {
            x_errors_mu1: self.m_x[0],
            x_errors_mu2: self.m_x[1],
            x_outcomes: self.x_entries.iter().map(|&(s, f, _)| (s, f)).collect(),
            z_sample: self.sample.iter().map(|e| (e.slot, e.bit)).collect(),
        })
    }

    /// Adopts Alice's kept bits (modeled reconciliation), reports how many
    /// of his raw bits disagreed, and evaluates his own finite-key bound.
    pub fn on_reconcile(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(BobState::AwaitReconcile, "reconcile")?;
        let Message::Reconcile {
            sample_errors_mu1,
            sample_errors_mu2,
            grant,
        } = msg
        else {
            return Err(unexpected("Reconcile", &msg));
        };
        if grant.len() != self.kept.len() {
            return Err(ProtocolViolation(format!(
                "grant holds {} bits, kept set has {}",
                grant.len(),
                self.kept.len()
            )));
        }
        for (i, e) in self.kept.iter().enumerate() {
            if grant.get(i) != (e.bit == 1) {
                self.kept_err[e.mu] += 1;
            }
        }
        self.corrected = grant;
        if let Some(b) = self.policy.tamper_kept_bit {
            if !self.corrected.is_empty() {
                let len = self.corrected.len() as u64;
                self.corrected.flip((b % len) as usize);
            }
        }

        let m_z = [
            sample_errors_mu1 + self.kept_err[0],
            sample_errors_mu2 + self.kept_err[1],
        ];
        let counts = assemble_counts(
            &self.config,
            self.emitted_slots,
            self.n_z,
            m_z,
            self.n_x,
            self.m_x,
        );
        let report = secret_key_length(&counts, &self.config)
            .map_err(|e| ProtocolViolation(format!("finite-key evaluation failed: {e}")))?;
        self.report = Some(report);
        self.state = BobState::AwaitTag;
        Ok(Message::CountsAck {
            kept_errors_mu1: self.kept_err[0],
            kept_errors_mu2: self.kept_err[1],
        })
    }

    /// Computes his tag over the corrected key and reports the verdict.
    pub fn on_tag_exchange(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(BobState::AwaitTag, "tag exchange")?;
        let Message::TagExchange {
            tag_seed,
            tag_bits,
            tag,
        } = msg
        else {
            return Err(unexpected("TagExchange", &msg));
        };
        if self.corrected.is_empty() || tag_bits as usize > self.corrected.len() {
            return Err(ProtocolViolation(
                "tag wider than the kept key".into(),
            ));
        }
        let ok = tag_of(&self.corrected, tag_seed, tag_bits) == tag;
        self.state = if ok { BobState::AwaitPa } else { BobState::Aborted };
        Ok(Message::TagVerdict { ok })
    }

    /// Applies privacy amplification with Alice's seed after checking the
    /// announced length against his own bound.
    pub fn on_pa_seed(&mut self, msg: Message) -> Result<Message, ProtocolViolation> {
        self.expect(BobState::AwaitPa, "pa seed")?;
        let Message::PaSeed {
            key_length,
            pa_seed,
        } = msg
        else {
            return Err(unexpected("PaSeed", &msg));
        };
        let own = self
            .report
            .as_ref()
            .map(|r| (r.key_length as usize).min(self.corrected.len()))
            .unwrap_or(0);
        if key_length as usize != own || own == 0 {
            self.state = BobState::Aborted;
            return Ok(Message::Abort {
                reason: AbortReason::Channel,
                detail: format!("announced key length {key_length} != local bound {own}"),
            });
        }
        self.final_key = Some(pa_extract(&self.corrected, pa_seed, own));
        self.state = BobState::Done;
        Ok(Message::Finished)
    }

    pub fn final_key(&self) -> Option<&BitString> {
        self.final_key.as_ref()
    }

    pub fn report(&self) -> Option<&KeyLengthReport> {
        self.report.as_ref()
    }

    fn expect(&self, want: BobState, what: &str) -> Result<(), ProtocolViolation> {
        if self.state != want {
            return Err(ProtocolViolation(format!(
                "{what} not valid in state {:?}",
                self.state
            )));
        }
        Ok(())
    }
}

fn unexpected(want: &str, got: &Message) -> ProtocolViolation {
    ProtocolViolation(format!("expected {want}, got tag 0x{:02x}", got.tag()))
}
