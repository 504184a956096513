//! Per-slot transmission records and the deterministic processes that
//! generate them: Alice's state choices, Bob's detection stream, and
//! basis sifting.
//!
//! Alice's choices are a pure function of (alice seed, slot index), so any
//! subset of slots can be re-derived on demand without storing the full
//! pulse train. Bob's detection stream is realized lazily by rejection
//! sampling under an envelope click probability: slots with no candidate
//! click are skipped in closed form, so a block at 20+ dB loss touches only
//! a few million of the ~10¹⁰ emitted slots.

use crate::bits::BitString;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use timebin_core::channel::{branch_rates, split_seed, BranchRates};
use timebin_core::{Basis, LinkModel, ProtocolConfig};

/// Decoy-state intensity label. `Mu1` is the signal intensity, `Mu2` the
/// weaker decoy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Intensity {
    Mu1,
    Mu2,
}

impl Intensity {
    pub fn index(self) -> usize {
        match self {
            Intensity::Mu1 => 0,
            Intensity::Mu2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Intensity::Mu1),
            1 => Some(Intensity::Mu2),
            _ => None,
        }
    }
}

/// One emitted pulse on Alice's side.
///
/// X-basis pulses carry no key bit: the three-state source prepares a single
/// superposition state in the monitoring basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PulseRecord {
    pub slot_index: u64,
    pub basis: Basis,
    pub bit: Option<u8>,
    pub intensity: Intensity,
}

/// One registered click on Bob's side.
///
/// For a Z-detector click `outcome` is the measured time bin (the key bit);
/// for an X-detector click it is the error flag of the monitored
/// interferometer port (1 = click on the destructive port).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectionRecord {
    pub slot_index: u64,
    pub basis: Basis,
    pub outcome: u8,
}

/// Derivation indices for the per-purpose seeds split off `session_seed`.
pub const SEED_ALICE: u64 = 1;
pub const SEED_CHANNEL: u64 = 2;
pub const SEED_SAMPLE: u64 = 3;
pub const SEED_TAG: u64 = 4;
pub const SEED_PA: u64 = 5;

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn remix(x: u64) -> u64 {
    split_seed(x, 0x9e37_79b9_7f4a_7c15)
}

/// Alice's basis, intensity, and key-bit choice for a slot, as a pure
/// function of her seed. Probabilities follow the config biases.
pub fn alice_choice(alice_seed: u64, slot_index: u64, config: &ProtocolConfig) -> PulseRecord {
    let r0 = split_seed(alice_seed, slot_index);
    let r1 = remix(r0);
    let r2 = remix(r1);
    let basis = if unit(r0) < config.p_z_alice {
        Basis::Z
    } else {
        Basis::X
    };
    let intensity = if unit(r1) < config.p_mu1 {
        Intensity::Mu1
    } else {
        Intensity::Mu2
    };
    let bit = match basis {
        Basis::Z => Some((r2 & 1) as u8),
        Basis::X => None,
    };
    PulseRecord {
        slot_index,
        basis,
        bit,
        intensity,
    }
}

/// Membership test for the disclosed QBER sample, shared by both parties.
pub fn in_sample(sample_seed: u64, slot_index: u64, sample_permille: u16) -> bool {
    let threshold = (u64::MAX as u128 * sample_permille as u128 / 1000) as u64;
    split_seed(sample_seed, slot_index) < threshold
}

#[derive(Debug, Error, PartialEq)]
pub enum RealizeError {
    /// The link produces no clicks at all, so no block can ever complete.
    #[error("click probability is zero; no detections possible")]
    NoClicks,
    /// The slot budget ran out before the block target was met.
    #[error("slot budget {budget} exhausted with {collected} of {target} Z detections")]
    BudgetExhausted {
        budget: u64,
        collected: u64,
        target: u64,
    },
}

/// Bob's realized detection stream for one block.
///
/// Runs until `target_z_detections` clicks have landed on the Z detector
/// (sifting then keeps a `p_z_alice` fraction of them), returning the
/// detections and the number of emitted slots consumed. Deterministic in
/// `session_seed`; Alice reproduces nothing of this — she only ever sees
/// the reported slot list.
pub fn realize_detections(
    config: &ProtocolConfig,
    link: &LinkModel,
    session_seed: u64,
    target_z_detections: u64,
    slot_budget: u64,
) -> Result<(Vec<DetectionRecord>, u64), RealizeError> {
    let alice_seed = split_seed(session_seed, SEED_ALICE);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(session_seed, SEED_CHANNEL));
    let z = branch_rates(config, link, Basis::Z);
    let x = branch_rates(config, link, Basis::X);
    // Envelope: a candidate click fires with the summed per-basis maxima of
    // the live-detector click probabilities (dead-time thinning folded in),
    // then thins to the exact per-intensity probability for the slot. The
    // geometric gap skip therefore jumps saturation rejections too, keeping
    // the candidate count proportional to the detection count at any loss.
    let pz = [z.p_click_gated[0] * z.f_sat, z.p_click_gated[1] * z.f_sat];
    let px = [x.p_click_gated[0] * x.f_sat, x.p_click_gated[1] * x.f_sat];
    let envelope = pz[0].max(pz[1]) + px[0].max(px[1]);
    if envelope <= 0.0 {
        return Err(RealizeError::NoClicks);
    }
    let envelope = envelope.min(1.0);
    let ln_miss = (-envelope).ln_1p();

    let mut detections = Vec::new();
    let mut z_hits = 0u64;
    let mut slot: u64 = 0;
    loop {
        if envelope < 1.0 {
            let u: f64 = rng.gen();
            let gap = ((1.0 - u).ln() / ln_miss).floor();
            if !gap.is_finite() || gap >= (slot_budget - slot) as f64 {
                return Err(RealizeError::BudgetExhausted {
                    budget: slot_budget,
                    collected: z_hits,
                    target: target_z_detections,
                });
            }
            slot += gap as u64;
        }
        if slot >= slot_budget {
            return Err(RealizeError::BudgetExhausted {
                budget: slot_budget,
                collected: z_hits,
                target: target_z_detections,
            });
        }

        let pulse = alice_choice(alice_seed, slot, config);
        let k = pulse.intensity.index();
        let v: f64 = rng.gen::<f64>() * envelope;
        let detector = if v < pz[k] {
            Some((Basis::Z, &z))
        } else if v < pz[k] + px[k] {
            Some((Basis::X, &x))
        } else {
            None
        };

        if let Some((detector_basis, rates)) = detector {
            let outcome = detection_outcome(&mut rng, &pulse, detector_basis, rates, k);
            detections.push(DetectionRecord {
                slot_index: slot,
                basis: detector_basis,
                outcome,
            });
            if detector_basis == Basis::Z {
                z_hits += 1;
                if z_hits >= target_z_detections {
                    return Ok((detections, slot + 1));
                }
            }
        }
        slot += 1;
    }
}

fn detection_outcome(
    rng: &mut ChaCha8Rng,
    pulse: &PulseRecord,
    detector_basis: Basis,
    rates: &BranchRates,
    k: usize,
) -> u8 {
    if pulse.basis != detector_basis {
        // Basis mismatch: the outcome is uniform and the slot is discarded
        // at sifting anyway.
        return rng.gen_range(0..2u8);
    }
    let p_wrong = rates.p_err[k] / rates.p_click_gated[k];
    let wrong = rng.gen::<f64>() < p_wrong;
    match detector_basis {
        Basis::Z => pulse.bit.unwrap_or(0) ^ wrong as u8,
        Basis::X => wrong as u8,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SiftError {
    #[error("duplicate slot index {0}")]
    DuplicateSlot(u64),
    #[error("slot indices not strictly increasing at {0}")]
    NonMonotonic(u64),
}

/// Result of basis reconciliation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiftOutcome {
    /// Alice's key bits at the matched Z slots (a placeholder 0 is used for
    /// records whose bit is unknown, i.e. when sifting basis-only views).
    pub raw_key_alice: BitString,
    /// Slots where both parties used the Z basis, ascending.
    pub z_slots: Vec<u64>,
    /// Slots where both parties used the X basis, ascending.
    pub x_slots: Vec<u64>,
}

/// Intersects Alice's records with Bob's reported (slot, basis) list.
///
/// Z∩Z slots become raw-key positions, X∩X slots become error-check
/// positions, everything else is discarded.
pub fn sift(
    alice_records: &[PulseRecord],
    bob_report: &[(u64, Basis)],
) -> Result<SiftOutcome, SiftError> {
    check_increasing(alice_records.iter().map(|r| r.slot_index))?;
    check_increasing(bob_report.iter().map(|&(s, _)| s))?;

    let mut out = SiftOutcome::default();
    let mut ai = 0usize;
    for &(slot, bob_basis) in bob_report {
        while ai < alice_records.len() && alice_records[ai].slot_index < slot {
            ai += 1;
        }
        let Some(rec) = alice_records.get(ai) else {
            break;
        };
        if rec.slot_index != slot || rec.basis != bob_basis {
            continue;
        }
        match bob_basis {
            Basis::Z => {
                out.z_slots.push(slot);
                out.raw_key_alice.push(rec.bit.unwrap_or(0) == 1);
            }
            Basis::X => out.x_slots.push(slot),
        }
    }
    Ok(out)
}

fn check_increasing(mut slots: impl Iterator<Item = u64>) -> Result<(), SiftError> {
    let Some(mut prev) = slots.next() else {
        return Ok(());
    };
    for s in slots {
        if s == prev {
            return Err(SiftError::DuplicateSlot(s));
        }
        if s < prev {
            return Err(SiftError::NonMonotonic(s));
        }
        prev = s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use timebin_core::paper_defaults;

    fn rec(slot: u64, basis: Basis, bit: Option<u8>) -> PulseRecord {
        PulseRecord {
            slot_index: slot,
            basis,
            bit,
            intensity: Intensity::Mu1,
        }
    }

    #[test]
    fn sift_hand_instance() {
        let alice = [
            rec(0, Basis::Z, Some(1)),
            rec(1, Basis::Z, Some(0)),
            rec(2, Basis::X, None),
            rec(3, Basis::Z, Some(1)),
        ];
        let bob = [(1, Basis::Z), (2, Basis::X), (3, Basis::X)];
        let out = sift(&alice, &bob).unwrap();
        assert_eq!(out.z_slots, vec![1]);
        assert_eq!(out.x_slots, vec![2]);
        assert_eq!(out.raw_key_alice.len(), 1);
        assert!(!out.raw_key_alice.get(0));
    }

    #[test]
    fn empty_report_sifts_to_nothing() {
        let alice = [rec(0, Basis::Z, Some(1))];
        let out = sift(&alice, &[]).unwrap();
        assert!(out.z_slots.is_empty());
        assert!(out.x_slots.is_empty());
        assert!(out.raw_key_alice.is_empty());
    }

    #[test]
    fn duplicate_and_decreasing_slots_error() {
        let alice = [rec(0, Basis::Z, Some(1)), rec(0, Basis::Z, Some(1))];
        assert_eq!(sift(&alice, &[]).unwrap_err(), SiftError::DuplicateSlot(0));
        let bob = [(5, Basis::Z), (3, Basis::Z)];
        assert_eq!(sift(&[], &bob).unwrap_err(), SiftError::NonMonotonic(3));
    }

    #[test]
    fn sift_matches_brute_force_intersection() {
        let (config, _) = paper_defaults();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let alice_seed = split_seed(500 + trial, SEED_ALICE);
            let mut alice = Vec::new();
            let mut bob = Vec::new();
            for s in 0..10_000u64 {
                if rng.gen_bool(0.3) {
                    alice.push(alice_choice(alice_seed, s, &config));
                }
                if rng.gen_bool(0.05) {
                    let basis = if rng.gen_bool(0.5) { Basis::Z } else { Basis::X };
                    bob.push((s, basis));
                }
            }
            let out = sift(&alice, &bob).unwrap();

            let amap: BTreeMap<u64, &PulseRecord> =
                alice.iter().map(|r| (r.slot_index, r)).collect();
            let mut z = Vec::new();
            let mut x = Vec::new();
            for &(slot, basis) in &bob {
                if let Some(r) = amap.get(&slot) {
                    if r.basis == basis {
                        match basis {
                            Basis::Z => z.push(slot),
                            Basis::X => x.push(slot),
                        }
                    }
                }
            }
            assert_eq!(out.z_slots, z, "trial {trial}");
            assert_eq!(out.x_slots, x, "trial {trial}");
            assert_eq!(out.raw_key_alice.len(), z.len());
            for (i, &slot) in z.iter().enumerate() {
                assert_eq!(out.raw_key_alice.get(i), amap[&slot].bit == Some(1));
            }
        }
    }

    #[test]
    fn alice_choices_follow_config_biases() {
        let (config, _) = paper_defaults();
        let n = 200_000u64;
        let mut z = 0u64;
        let mut mu1 = 0u64;
        let mut ones = 0u64;
        let mut z_count = 0u64;
        for s in 0..n {
            let r = alice_choice(42, s, &config);
            assert_eq!(r.slot_index, s);
            assert_eq!(r.bit.is_some(), r.basis == Basis::Z);
            if r.basis == Basis::Z {
                z += 1;
                z_count += 1;
                ones += r.bit.unwrap() as u64;
            }
            if r.intensity == Intensity::Mu1 {
                mu1 += 1;
            }
        }
        let sigma = |p: f64, m: u64| 5.0 * (p * (1.0 - p) * m as f64).sqrt();
        assert!((z as f64 - config.p_z_alice * n as f64).abs() < sigma(config.p_z_alice, n));
        assert!((mu1 as f64 - config.p_mu1 * n as f64).abs() < sigma(config.p_mu1, n));
        assert!((ones as f64 - 0.5 * z_count as f64).abs() < sigma(0.5, z_count));
    }

    #[test]
    fn alice_choice_is_a_pure_function() {
        let (config, _) = paper_defaults();
        for s in [0u64, 1, 999_999_999_999] {
            assert_eq!(alice_choice(7, s, &config), alice_choice(7, s, &config));
        }
        assert_ne!(
            (0..64).map(|s| alice_choice(1, s, &config).basis).collect::<Vec<_>>(),
            (0..64).map(|s| alice_choice(2, s, &config).basis).collect::<Vec<_>>(),
        );
    }

    #[test]
    fn sample_membership_matches_permille() {
        let n = 500_000u64;
        let hits = (0..n).filter(|&s| in_sample(99, s, 20)).count() as f64;
        let mean = 0.02 * n as f64;
        let sigma = (0.02 * 0.98 * n as f64).sqrt();
        assert!((hits - mean).abs() < 5.0 * sigma, "hits={hits}");
        assert_eq!((0..n).filter(|&s| in_sample(99, s, 0)).count(), 0);
    }

    #[test]
    fn realized_stream_is_deterministic_and_ordered() {
        let (config, link) = paper_defaults();
        let (a, na) = realize_detections(&config, &link, 31, 2_000, u64::MAX).unwrap();
        let (b, nb) = realize_detections(&config, &link, 31, 2_000, u64::MAX).unwrap();
        assert_eq!(a, b);
        assert_eq!(na, nb);
        check_increasing(a.iter().map(|d| d.slot_index)).unwrap();
        let z_hits = a.iter().filter(|d| d.basis == Basis::Z).count() as u64;
        assert_eq!(z_hits, 2_000);
        assert_eq!(a.last().unwrap().slot_index + 1, na);
        assert_eq!(a.last().unwrap().basis, Basis::Z);
    }

    #[test]
    fn realized_rates_match_the_analytic_model() {
        let (config, mut link) = paper_defaults();
        link.channel_loss = 10.0;
        let target = 20_000u64;
        let (dets, n_slots) = realize_detections(&config, &link, 77, target, u64::MAX).unwrap();

        let z = branch_rates(&config, &link, Basis::Z);
        let x = branch_rates(&config, &link, Basis::X);
        let p_z_click = (config.p_mu1 * z.p_click_gated[0]
            + (1.0 - config.p_mu1) * z.p_click_gated[1])
            * z.f_sat;
        let p_x_click = (config.p_mu1 * x.p_click_gated[0]
            + (1.0 - config.p_mu1) * x.p_click_gated[1])
            * x.f_sat;

        // Slots consumed to reach the Z target: mean target / p_z_click.
        let expect_slots = target as f64 / p_z_click;
        let sigma_slots = (target as f64).sqrt() / p_z_click;
        assert!(
            ((n_slots as f64) - expect_slots).abs() < 5.0 * sigma_slots,
            "slots {n_slots} vs {expect_slots}"
        );

        let x_hits = dets.iter().filter(|d| d.basis == Basis::X).count() as f64;
        let expect_x = n_slots as f64 * p_x_click;
        assert!(
            (x_hits - expect_x).abs() < 5.0 * (expect_x * (1.0 - p_x_click)).sqrt() + 5.0,
            "x hits {x_hits} vs {expect_x}"
        );

        // Z-error rate among basis-matched Z detections tracks the model.
        let alice_seed = split_seed(77, SEED_ALICE);
        let mut errors = 0u64;
        let mut matched = 0u64;
        for d in dets.iter().filter(|d| d.basis == Basis::Z) {
            let p = alice_choice(alice_seed, d.slot_index, &config);
            if p.basis == Basis::Z {
                matched += 1;
                if p.bit != Some(d.outcome) {
                    errors += 1;
                }
            }
        }
        let p_err_cond = (config.p_mu1 * z.p_err[0] + (1.0 - config.p_mu1) * z.p_err[1])
            / (config.p_mu1 * z.p_click_gated[0] + (1.0 - config.p_mu1) * z.p_click_gated[1]);
        let expect_err = matched as f64 * p_err_cond;
        assert!(
            (errors as f64 - expect_err).abs()
                < 5.0 * (expect_err * (1.0 - p_err_cond)).sqrt() + 5.0,
            "errors {errors} vs {expect_err}"
        );
    }

    #[test]
    fn slot_budget_is_enforced() {
        let (config, mut link) = paper_defaults();
        link.channel_loss = 40.0;
        let err = realize_detections(&config, &link, 5, 1_000_000, 100_000).unwrap_err();
        assert!(matches!(err, RealizeError::BudgetExhausted { budget: 100_000, .. }));
    }

    #[test]
    fn dead_link_yields_no_clicks_error() {
        let (config, mut link) = paper_defaults();
        link.eta_detector = 0.0;
        link.dark_rate = 0.0;
        assert_eq!(
            realize_detections(&config, &link, 5, 10, 1_000).unwrap_err(),
            RealizeError::NoClicks
        );
    }
}
