//! Photon-number-resolved channel statistics.
//!
//! The chain source → fiber → passive splitter → two gated detectors is
//! modeled per (alice-basis, intensity) cell. Pulses carry a Poisson photon
//! number truncated at [`K_MAX`]; detection is per-photon thinning plus a
//! per-slot background probability; detector saturation is a block-level
//! thinning factor from the non-paralyzable dead-time law. Everything exists
//! twice: as closed-form expectations ([`expected_observables`]) and as a
//! seeded aggregate sampler ([`simulate_block`]) that additionally returns
//! the per-photon-number [`GroundTruth`] used by bound-validation oracles.
//!
//! Background counts enter two ways. Detection windows admit only a
//! `gate_duty` fraction of the background into the quantum observables, but
//! the full background rate still occupies the detectors and therefore drives
//! dead-time saturation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LinkModel, ProtocolConfig};
use crate::units::db_to_transmittance;

/// Photon-number truncation; the Poisson tail beyond this is folded into the
/// last bin (below 10⁻¹⁵ of the mass for μ ≤ 0.41).
pub const K_MAX: usize = 12;

/// Hard cap on pulses simulated per block.
pub const DEFAULT_PULSE_BUDGET: f64 = 1e15;

/// Measurement/encoding basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("block unreachable at this loss: {needed:.3e} pulses needed, budget is {budget:.3e}")]
    BlockUnreachable { needed: f64, budget: f64 },
}

/// Per-block observables of the decoy analysis: sifted detection and error
/// counts per (basis, intensity) cell. Counts are `f64` so the same type
/// carries integer Monte-Carlo tallies and closed-form expectations; sampled
/// counts stay integer-exact well past any reachable block size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub n_z_mu1: f64,
    pub n_z_mu2: f64,
    pub m_z_mu1: f64,
    pub m_z_mu2: f64,
    pub n_x_mu1: f64,
    pub n_x_mu2: f64,
    pub m_x_mu1: f64,
    pub m_x_mu2: f64,
    pub pulses_z_mu1: f64,
    pub pulses_z_mu2: f64,
    pub pulses_x_mu1: f64,
    pub pulses_x_mu2: f64,
    /// Wall-clock channel time represented by the block, seconds.
    pub elapsed_time: f64,
}

impl BlockCounts {
    pub fn n_cell(&self, basis: Basis, mu_index: usize) -> f64 {
        match (basis, mu_index) {
            (Basis::Z, 0) => self.n_z_mu1,
            (Basis::Z, 1) => self.n_z_mu2,
            (Basis::X, 0) => self.n_x_mu1,
            (Basis::X, 1) => self.n_x_mu2,
            _ => panic!("mu_index must be 0 or 1"),
        }
    }

    pub fn m_cell(&self, basis: Basis, mu_index: usize) -> f64 {
        match (basis, mu_index) {
            (Basis::Z, 0) => self.m_z_mu1,
            (Basis::Z, 1) => self.m_z_mu2,
            (Basis::X, 0) => self.m_x_mu1,
            (Basis::X, 1) => self.m_x_mu2,
            _ => panic!("mu_index must be 0 or 1"),
        }
    }

    pub fn pulses_cell(&self, basis: Basis, mu_index: usize) -> f64 {
        match (basis, mu_index) {
            (Basis::Z, 0) => self.pulses_z_mu1,
            (Basis::Z, 1) => self.pulses_z_mu2,
            (Basis::X, 0) => self.pulses_x_mu1,
            (Basis::X, 1) => self.pulses_x_mu2,
            _ => panic!("mu_index must be 0 or 1"),
        }
    }

    fn set_cell(&mut self, basis: Basis, mu_index: usize, n: f64, m: f64, pulses: f64) {
        match (basis, mu_index) {
            (Basis::Z, 0) => {
                self.n_z_mu1 = n;
                self.m_z_mu1 = m;
                self.pulses_z_mu1 = pulses;
            }
            (Basis::Z, 1) => {
                self.n_z_mu2 = n;
                self.m_z_mu2 = m;
                self.pulses_z_mu2 = pulses;
            }
            (Basis::X, 0) => {
                self.n_x_mu1 = n;
                self.m_x_mu1 = m;
                self.pulses_x_mu1 = pulses;
            }
            (Basis::X, 1) => {
                self.n_x_mu2 = n;
                self.m_x_mu2 = m;
                self.pulses_x_mu2 = pulses;
            }
            _ => panic!("mu_index must be 0 or 1"),
        }
    }

    pub fn n_total(&self, basis: Basis) -> f64 {
        self.n_cell(basis, 0) + self.n_cell(basis, 1)
    }

    pub fn m_total(&self, basis: Basis) -> f64 {
        self.m_cell(basis, 0) + self.m_cell(basis, 1)
    }

    pub fn total_pulses(&self) -> f64 {
        self.pulses_z_mu1 + self.pulses_z_mu2 + self.pulses_x_mu1 + self.pulses_x_mu2
    }

    pub fn qber_z(&self) -> f64 {
        let n = self.n_total(Basis::Z);
        if n > 0.0 {
            self.m_total(Basis::Z) / n
        } else {
            0.0
        }
    }

    pub fn qber_x(&self) -> f64 {
        let n = self.n_total(Basis::X);
        if n > 0.0 {
            self.m_total(Basis::X) / n
        } else {
            0.0
        }
    }

    /// Adds another block cell-by-cell (used when a drifting block is
    /// simulated in time slices).
    pub fn accumulate(&mut self, other: &BlockCounts) {
        self.n_z_mu1 += other.n_z_mu1;
        self.n_z_mu2 += other.n_z_mu2;
        self.m_z_mu1 += other.m_z_mu1;
        self.m_z_mu2 += other.m_z_mu2;
        self.n_x_mu1 += other.n_x_mu1;
        self.n_x_mu2 += other.n_x_mu2;
        self.m_x_mu1 += other.m_x_mu1;
        self.m_x_mu2 += other.m_x_mu2;
        self.pulses_z_mu1 += other.pulses_z_mu1;
        self.pulses_z_mu2 += other.pulses_z_mu2;
        self.pulses_x_mu1 += other.pulses_x_mu1;
        self.pulses_x_mu2 += other.pulses_x_mu2;
        self.elapsed_time += other.elapsed_time;
    }
}

/// Per-photon-number event tallies known only to the simulator. Marginals
/// over `k` reproduce the matching [`BlockCounts`] cells exactly; the raw
/// totals additionally count pre-sifting clicks (any Alice basis) per
/// detector for saturation checks. Never serialized into session outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    /// `sent[basis][mu_index][k]`: pulses with exactly `k` photons.
    pub sent: [[[u64; K_MAX + 1]; 2]; 2],
    /// Sifted detections per photon number.
    pub detections: [[[u64; K_MAX + 1]; 2]; 2],
    /// Sifted errors per photon number.
    pub errors: [[[u64; K_MAX + 1]; 2]; 2],
    /// Post-dead-time clicks on the Z detector regardless of Alice's basis.
    pub raw_z_detections: u64,
    /// Post-dead-time clicks on the X detector regardless of Alice's basis.
    pub raw_x_detections: u64,
}

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth {
            sent: [[[0; K_MAX + 1]; 2]; 2],
            detections: [[[0; K_MAX + 1]; 2]; 2],
            errors: [[[0; K_MAX + 1]; 2]; 2],
            raw_z_detections: 0,
            raw_x_detections: 0,
        }
    }
}

impl GroundTruth {
    /// Sifted detections with photon number `k` in `basis`, both intensities.
    pub fn detections_k(&self, basis: Basis, k: usize) -> u64 {
        let b = basis.index();
        self.detections[b][0][k] + self.detections[b][1][k]
    }

    /// Sifted errors with photon number `k` in `basis`, both intensities.
    pub fn errors_k(&self, basis: Basis, k: usize) -> u64 {
        let b = basis.index();
        self.errors[b][0][k] + self.errors[b][1][k]
    }

    pub fn accumulate(&mut self, other: &GroundTruth) {
        for b in 0..2 {
            for i in 0..2 {
                for k in 0..=K_MAX {
                    self.sent[b][i][k] += other.sent[b][i][k];
                    self.detections[b][i][k] += other.detections[b][i][k];
                    self.errors[b][i][k] += other.errors[b][i][k];
                }
            }
        }
        self.raw_z_detections += other.raw_z_detections;
        self.raw_x_detections += other.raw_x_detections;
    }
}

/// Slow time-variation of channel loss and interferometer visibility:
/// a sinusoid per quantity plus optional step changes in loss. Evaluated
/// values are clamped to their physical ranges.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub loss_amp_db: f64,
    pub loss_period_s: f64,
    pub loss_phase_rad: f64,
    pub vis_amp: f64,
    pub vis_period_s: f64,
    pub vis_phase_rad: f64,
    /// Step offsets applied to loss from `at_s` onward, dB.
    pub loss_steps: Vec<LossStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStep {
    pub at_s: f64,
    pub delta_db: f64,
}

impl DriftProfile {
    pub fn is_static(&self) -> bool {
        self.loss_amp_db == 0.0 && self.vis_amp == 0.0 && self.loss_steps.is_empty()
    }

    fn sinusoid(amp: f64, period: f64, phase: f64, t: f64) -> f64 {
        if amp == 0.0 || period <= 0.0 {
            0.0
        } else {
            amp * (2.0 * std::f64::consts::PI * t / period + phase).sin()
        }
    }

    /// The link as seen at time `t` (seconds from block start).
    pub fn link_at(&self, base: &LinkModel, t: f64) -> LinkModel {
        let mut link = base.clone();
        let mut loss = base.channel_loss
            + Self::sinusoid(self.loss_amp_db, self.loss_period_s, self.loss_phase_rad, t);
        for step in &self.loss_steps {
            if t >= step.at_s {
                loss += step.delta_db;
            }
        }
        link.channel_loss = loss.max(0.0);
        link.visibility_x = (base.visibility_x
            + Self::sinusoid(self.vis_amp, self.vis_period_s, self.vis_phase_rad, t))
        .clamp(0.0, 1.0);
        link
    }
}

/// End-to-end detection probability per photon for the given basis path:
/// `10^(-loss/10) · bob_p(basis) · η_receiver(basis) · η_detector`.
pub fn transmittance(link: &LinkModel, basis: Basis) -> f64 {
    let t = db_to_transmittance(link.channel_loss);
    match basis {
        Basis::Z => t * link.bob_p_z * link.eta_receiver_z * link.eta_detector,
        Basis::X => t * link.bob_p_x * link.eta_receiver_x * link.eta_detector,
    }
}

/// Total background rate seen by a detector, counts/s: dark counts, the
/// light-independent baseline, and the crosstalk term driven by the total
/// in-band classical power (CW carrier plus any optical-sync residue).
pub fn background_rate(link: &LinkModel) -> f64 {
    link.dark_rate + link.baseline_noise + link.crosstalk_coeff * link.effective_classical_mw()
}

/// Non-paralyzable dead-time saturation: `rate / (1 + rate·dead_time)`.
pub fn dead_time_throughput(rate_in: f64, dead_time: f64) -> f64 {
    rate_in / (1.0 + rate_in * dead_time)
}

/// Per-slot click probability of a weak coherent pulse of mean photon number
/// `mu` through total efficiency `eta` on a detector with per-slot background
/// probability `p_bg_slot`: `1 - (1 - p_bg_slot)·exp(-mu·eta)`, evaluated in
/// a form that stays exact for μη far below machine epsilon.
pub fn click_probability(mu: f64, eta: f64, p_bg_slot: f64) -> f64 {
    let p_sig = -(-mu * eta).exp_m1();
    p_bg_slot + (1.0 - p_bg_slot) * p_sig
}

/// Mean-rate picture of one detector branch.
#[derive(Clone, Debug)]
pub struct BranchRates {
    pub basis: Basis,
    pub eta: f64,
    /// Background probability per slot inside the detection window.
    pub p_bg_gated: f64,
    /// Background probability per slot over the whole slot (drives dead time).
    pub p_bg_raw: f64,
    /// Windowed click probability per intensity.
    pub p_click_gated: [f64; 2],
    /// Whole-slot click probability per intensity.
    pub p_click_raw: [f64; 2],
    /// Unconditional windowed error probability per intensity.
    pub p_err: [f64; 2],
    /// Intrinsic error probability of the branch.
    pub e_intrinsic: f64,
    /// Pre-dead-time click rate on this detector, counts/s (any Alice basis).
    pub raw_rate: f64,
    /// Block-level dead-time thinning factor.
    pub f_sat: f64,
    /// Alice's probability of encoding in this basis.
    pub p_alice: f64,
}

/// Computes the mean-rate picture of one detector branch.
pub fn branch_rates(config: &ProtocolConfig, link: &LinkModel, basis: Basis) -> BranchRates {
    let eta = transmittance(link, basis);
    let bg = background_rate(link);
    let p_bg_gated = (bg * link.gate_duty / config.pulse_rate).min(1.0);
    let p_bg_raw = (bg / config.pulse_rate).min(1.0);
    let e_intrinsic = match basis {
        Basis::Z => link.e_intrinsic_z,
        Basis::X => (1.0 - link.visibility_x) / 2.0,
    };
    let mus = [config.mu1, config.mu2];
    let p_mus = [config.p_mu1, config.p_mu2];
    let mut p_click_gated = [0.0; 2];
    let mut p_click_raw = [0.0; 2];
    let mut p_err = [0.0; 2];
    let mut raw_per_pulse = 0.0;
    for i in 0..2 {
        let p_sig = -(-mus[i] * eta).exp_m1();
        p_click_gated[i] = click_probability(mus[i], eta, p_bg_gated);
        p_click_raw[i] = click_probability(mus[i], eta, p_bg_raw);
        p_err[i] = e_intrinsic * p_sig + 0.5 * p_bg_gated * (1.0 - p_sig);
        raw_per_pulse += p_mus[i] * p_click_raw[i];
    }
    let raw_rate = config.pulse_rate * raw_per_pulse;
    let f_sat = 1.0 / (1.0 + raw_rate * link.dead_time);
    let p_alice = match basis {
        Basis::Z => config.p_z_alice,
        Basis::X => config.p_x_alice,
    };
    BranchRates {
        basis,
        eta,
        p_bg_gated,
        p_bg_raw,
        p_click_gated,
        p_click_raw,
        p_err,
        e_intrinsic,
        raw_rate,
        f_sat,
        p_alice,
    }
}

/// Probability per transmitted pulse of producing one sifted Z detection
/// (Alice chose Z, Bob's Z detector clicked inside the window, click survived
/// dead time).
pub fn sift_prob_z(config: &ProtocolConfig, link: &LinkModel) -> f64 {
    let z = branch_rates(config, link, Basis::Z);
    let p_mus = [config.p_mu1, config.p_mu2];
    z.p_alice
        * z.f_sat
        * (0..2).map(|i| p_mus[i] * z.p_click_gated[i]).sum::<f64>()
}

/// Closed-form expectations of every [`BlockCounts`] field for a block of
/// `n_pulses` transmitted pulses.
pub fn expected_observables_for_pulses(
    config: &ProtocolConfig,
    link: &LinkModel,
    n_pulses: f64,
) -> BlockCounts {
    let p_mus = [config.p_mu1, config.p_mu2];
    let mut counts = BlockCounts::default();
    for basis in Basis::ALL {
        let r = branch_rates(config, link, basis);
        for i in 0..2 {
            let cell_pulses = n_pulses * r.p_alice * p_mus[i];
            let n = cell_pulses * r.p_click_gated[i] * r.f_sat;
            let m = cell_pulses * r.p_err[i] * r.f_sat;
            counts.set_cell(basis, i, n, m, cell_pulses);
        }
    }
    counts.elapsed_time = n_pulses / config.pulse_rate;
    counts
}

/// Closed-form expectations for one analysis block: the pulse count is set
/// so the expected sifted Z yield equals `config.block_size`. If nothing can
/// ever click, a zero block is returned.
pub fn expected_observables(config: &ProtocolConfig, link: &LinkModel) -> BlockCounts {
    let sift = sift_prob_z(config, link);
    if sift <= 0.0 {
        return BlockCounts::default();
    }
    expected_observables_for_pulses(config, link, config.block_size as f64 / sift)
}

/// Poisson pmf over 0..=K_MAX with the tail folded into the last bin.
fn truncated_poisson(mu: f64) -> [f64; K_MAX + 1] {
    let mut pmf = [0.0; K_MAX + 1];
    if mu <= 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    let mut term = (-mu).exp();
    let mut acc = 0.0;
    for (k, slot) in pmf.iter_mut().enumerate().take(K_MAX) {
        *slot = term;
        acc += term;
        term *= mu / (k + 1) as f64;
    }
    pmf[K_MAX] = (1.0 - acc).max(0.0);
    pmf
}

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("probability in range").sample(rng)
}

/// Splits `n` into categories with the given probabilities (which must sum
/// to 1); the last category absorbs the remainder.
fn multinomial<const N: usize>(rng: &mut ChaCha8Rng, n: u64, probs: &[f64; N]) -> [u64; N] {
    let mut out = [0u64; N];
    let mut remaining = n;
    let mut rest = 1.0f64;
    for i in 0..N - 1 {
        if remaining == 0 || rest <= 0.0 {
            break;
        }
        let q = (probs[i] / rest).clamp(0.0, 1.0);
        let x = binomial(rng, remaining, q);
        out[i] = x;
        remaining -= x;
        rest -= probs[i];
    }
    out[N - 1] = remaining;
    out
}

fn simulate_pulses_into(
    config: &ProtocolConfig,
    link: &LinkModel,
    n_pulses: u64,
    rng: &mut ChaCha8Rng,
    counts: &mut BlockCounts,
    truth: &mut GroundTruth,
) {
    let branches = [
        branch_rates(config, link, Basis::Z),
        branch_rates(config, link, Basis::X),
    ];
    let cell_probs = [
        config.p_z_alice * config.p_mu1,
        config.p_z_alice * config.p_mu2,
        config.p_x_alice * config.p_mu1,
        config.p_x_alice * config.p_mu2,
    ];
    let cells = multinomial(rng, n_pulses, &cell_probs);
    let pmfs = [truncated_poisson(config.mu1), truncated_poisson(config.mu2)];

    for (cell, &sent_cell) in cells.iter().enumerate() {
        let basis = if cell < 2 { Basis::Z } else { Basis::X };
        let mu_index = cell % 2;
        let own = &branches[basis.index()];
        let other = &branches[1 - basis.index()];

        // Pre-sifting click tallies on both detectors (saturation oracle).
        let raw_own = binomial(rng, sent_cell, own.p_click_raw[mu_index] * own.f_sat);
        let raw_other = binomial(rng, sent_cell, other.p_click_raw[mu_index] * other.f_sat);
        let (raw_z, raw_x) = match basis {
            Basis::Z => (raw_own, raw_other),
            Basis::X => (raw_other, raw_own),
        };
        truth.raw_z_detections += raw_z;
        truth.raw_x_detections += raw_x;

        // Matching-basis (sifted) statistics, resolved per photon number.
        let by_k = multinomial(rng, sent_cell, &pmfs[mu_index]);
        let mut cell_n = 0u64;
        let mut cell_m = 0u64;
        for (k, &sent_k) in by_k.iter().enumerate() {
            truth.sent[basis.index()][mu_index][k] += sent_k;
            if sent_k == 0 {
                continue;
            }
            let p_sig = if k == 0 {
                0.0
            } else {
                -(k as f64 * (-own.eta).ln_1p()).exp_m1()
            };
            let p_det = own.p_bg_gated + (1.0 - own.p_bg_gated) * p_sig;
            let det = binomial(rng, sent_k, p_det * own.f_sat);
            let p_err_given_click = if p_det > 0.0 {
                (own.e_intrinsic * p_sig + 0.5 * own.p_bg_gated * (1.0 - p_sig)) / p_det
            } else {
                0.0
            };
            let err = binomial(rng, det, p_err_given_click.min(1.0));
            truth.detections[basis.index()][mu_index][k] += det;
            truth.errors[basis.index()][mu_index][k] += err;
            cell_n += det;
            cell_m += err;
        }
        let n0 = counts.n_cell(basis, mu_index) + cell_n as f64;
        let m0 = counts.m_cell(basis, mu_index) + cell_m as f64;
        let p0 = counts.pulses_cell(basis, mu_index) + sent_cell as f64;
        counts.set_cell(basis, mu_index, n0, m0, p0);
    }
    counts.elapsed_time += n_pulses as f64 / config.pulse_rate;
}

/// Simulates a fixed number of transmitted pulses under a static link.
pub fn simulate_pulses(
    config: &ProtocolConfig,
    link: &LinkModel,
    n_pulses: u64,
    seed: u64,
) -> (BlockCounts, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BlockCounts::default();
    let mut truth = GroundTruth::default();
    simulate_pulses_into(config, link, n_pulses, &mut rng, &mut counts, &mut truth);
    (counts, truth)
}

/// Simulates one analysis block: enough pulses that the expected sifted Z
/// yield equals `config.block_size`, sampled per (basis, intensity, photon
/// number) cell. Identical inputs and seed give identical outputs.
pub fn simulate_block(
    config: &ProtocolConfig,
    link: &LinkModel,
    drift: Option<&DriftProfile>,
    seed: u64,
) -> Result<(BlockCounts, GroundTruth), ChannelError> {
    simulate_block_with_budget(config, link, drift, seed, DEFAULT_PULSE_BUDGET)
}

/// [`simulate_block`] with an explicit pulse budget.
pub fn simulate_block_with_budget(
    config: &ProtocolConfig,
    link: &LinkModel,
    drift: Option<&DriftProfile>,
    seed: u64,
    pulse_budget: f64,
) -> Result<(BlockCounts, GroundTruth), ChannelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BlockCounts::default();
    let mut truth = GroundTruth::default();

    let static_drift = drift.map_or(true, DriftProfile::is_static);
    if static_drift {
        let link = match drift {
            Some(d) => d.link_at(link, 0.0),
            None => link.clone(),
        };
        let sift = sift_prob_z(config, &link);
        let n_pulses = if sift <= 0.0 {
            // Nothing ever clicks: the block can never fill, so emit the
            // budget's worth of empty slots instead of running forever.
            pulse_budget as u64
        } else {
            let needed = (config.block_size as f64 / sift).ceil();
            if needed > pulse_budget {
                return Err(ChannelError::BlockUnreachable {
                    needed,
                    budget: pulse_budget,
                });
            }
            needed as u64
        };
        simulate_pulses_into(config, &link, n_pulses, &mut rng, &mut counts, &mut truth);
        return Ok((counts, truth));
    }

    let drift = drift.expect("static case handled above");
    const SLICES: usize = 64;
    let expected_yield = |elapsed: f64| -> f64 {
        let mut total = 0.0;
        for s in 0..SLICES {
            let t_mid = elapsed * (s as f64 + 0.5) / SLICES as f64;
            let link_t = drift.link_at(link, t_mid);
            total += config.pulse_rate * elapsed / SLICES as f64 * sift_prob_z(config, &link_t);
        }
        total
    };
    let sift0 = sift_prob_z(config, link).max(1e-300);
    let target = config.block_size as f64;
    let mut lo = 0.0;
    let mut hi = target / sift0 / config.pulse_rate;
    while expected_yield(hi) < target {
        hi *= 2.0;
        if hi * config.pulse_rate > pulse_budget {
            return Err(ChannelError::BlockUnreachable {
                needed: hi * config.pulse_rate,
                budget: pulse_budget,
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_yield(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let elapsed = 0.5 * (lo + hi);
    let total_pulses = (elapsed * config.pulse_rate).ceil();
    if total_pulses > pulse_budget {
        return Err(ChannelError::BlockUnreachable {
            needed: total_pulses,
            budget: pulse_budget,
        });
    }
    let total_pulses = total_pulses as u64;
    let per_slice = total_pulses / SLICES as u64;
    for s in 0..SLICES {
        let n_slice = if s == SLICES - 1 {
            total_pulses - per_slice * (SLICES as u64 - 1)
        } else {
            per_slice
        };
        let t_mid = elapsed * (s as f64 + 0.5) / SLICES as f64;
        let link_t = drift.link_at(link, t_mid);
        simulate_pulses_into(config, &link_t, n_slice, &mut rng, &mut counts, &mut truth);
    }
    Ok((counts, truth))
}

/// Draws a seeded RNG for ad-hoc sampling alongside the block simulator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based seed splitting for independent sweep points.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform f64 in [0,1) from any RNG (used by the session layer).
pub fn uniform01(rng: &mut impl Rng) -> f64 {
    rng.gen::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{paper_defaults, SyncMode};

    fn sum3(a: &[[[u64; K_MAX + 1]; 2]; 2], b: usize, i: usize) -> u64 {
        a[b][i].iter().sum()
    }

    #[test]
    fn transmittance_lossless_identity() {
        let (_, mut link) = paper_defaults();
        link.channel_loss = 0.0;
        link.bob_p_z = 1.0;
        link.bob_p_x = 0.0;
        link.eta_receiver_z = 1.0;
        link.eta_detector = 1.0;
        assert_eq!(transmittance(&link, Basis::Z), 1.0);
    }

    #[test]
    fn transmittance_paper_defaults() {
        let (_, link) = paper_defaults();
        let z = transmittance(&link, Basis::Z);
        let x = transmittance(&link, Basis::X);
        assert!((z / 7.148954112518534e-4 - 1.0).abs() < 1e-12, "{z}");
        assert!((x / 4.4482381144559764e-5 - 1.0).abs() < 1e-12, "{x}");
    }

    #[test]
    fn background_rate_dark_fiber() {
        let (_, link) = paper_defaults();
        assert_eq!(background_rate(&link), 2700.0);
    }

    #[test]
    fn background_rate_independent_of_power_without_crosstalk() {
        let (_, mut link) = paper_defaults();
        link.crosstalk_coeff = 0.0;
        let r0 = background_rate(&link);
        link.classical_power = Some(10.0);
        assert_eq!(background_rate(&link), r0);
    }

    #[test]
    fn crosstalk_term_doubles_per_three_db() {
        let (_, mut link) = paper_defaults();
        link.dark_rate = 0.0;
        link.classical_power = Some(-30.0);
        let r1 = background_rate(&link);
        link.classical_power = Some(-30.0 + 10.0 * 2f64.log10());
        let r2 = background_rate(&link);
        assert!((r2 / r1 - 2.0).abs() < 1e-12);
        link.classical_power = Some(-27.0);
        let r3 = background_rate(&link);
        assert!((r3 / r1 - 10f64.powf(0.3)).abs() < 1e-12);
    }

    #[test]
    fn optical_sync_adds_attenuated_launch_power() {
        let (_, mut link) = paper_defaults();
        link.dark_rate = 0.0;
        link.sync = SyncMode::Optical {
            launch_power_dbm: -29.0,
            pattern_rate_bps: 0.145e6,
            rejection_db: 10.0,
        };
        let with_sync = background_rate(&link);
        link.sync = SyncMode::Electrical;
        link.classical_power = Some(-39.0);
        assert!((with_sync / background_rate(&link) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dead_time_known_values() {
        assert_eq!(dead_time_throughput(0.0, 20e-6), 0.0);
        let out = dead_time_throughput(174e3, 20e-6);
        assert!((out / 38839.285714285714 - 1.0).abs() < 1e-12, "{out}");
        let huge = dead_time_throughput(1e12, 20e-6);
        assert!(huge < 50e3 && huge > 49.99e3);
    }

    #[test]
    fn dead_time_monotone_with_ceiling() {
        let mut prev = -1.0;
        for i in 0..2000 {
            let rate = i as f64 * 1e3;
            let out = dead_time_throughput(rate, 20e-6);
            assert!(out >= prev);
            assert!(out <= 1.0 / 20e-6);
            prev = out;
        }
    }

    #[test]
    fn click_probability_known_values() {
        assert_eq!(click_probability(0.0, 0.5, 0.0), 0.0);
        assert!((click_probability(1e9, 1.0, 0.0) - 1.0).abs() < 1e-15);
        let p = click_probability(0.41, 7.15e-4, 0.0);
        assert!((p / 2.9310703573717711e-4 - 1.0).abs() < 1e-12, "{p}");
        let with_bg = click_probability(0.0, 0.0, 0.25);
        assert_eq!(with_bg, 0.25);
    }

    #[test]
    fn expected_observables_ideal_channel_has_zero_qber() {
        let (config, mut link) = paper_defaults();
        link.channel_loss = 0.0;
        link.dark_rate = 0.0;
        link.e_intrinsic_z = 0.0;
        link.visibility_x = 1.0;
        let counts = expected_observables(&config, &link);
        assert_eq!(counts.qber_z(), 0.0);
        assert_eq!(counts.qber_x(), 0.0);
        assert!(counts.n_total(Basis::Z) > 0.0);
    }

    #[test]
    fn expected_qber_saturates_under_classical_power() {
        let (config, mut link) = paper_defaults();
        link.classical_power = Some(30.0);
        let counts = expected_observables(&config, &link);
        assert!(counts.qber_z() > 0.49, "qber_z = {}", counts.qber_z());
    }

    #[test]
    fn expected_counts_decrease_with_loss_and_qber_rises_with_power() {
        let (config, mut link) = paper_defaults();
        let mut prev_n = f64::INFINITY;
        for loss in [5.0, 10.0, 15.0, 20.0, 25.0, 30.0] {
            link.channel_loss = loss;
            let n = expected_observables_for_pulses(&config, &link, 1e12).n_z_mu1;
            assert!(n < prev_n, "n_z_mu1 not decreasing at {loss} dB");
            prev_n = n;
        }
        link.channel_loss = 21.0;
        let mut prev_q = -1.0;
        for p in [-40.0, -35.0, -30.0, -25.0, -20.0] {
            link.classical_power = Some(p);
            let q = expected_observables(&config, &link).qber_z();
            assert!(q > prev_q, "qber_z not increasing at {p} dBm");
            prev_q = q;
        }
    }

    #[test]
    fn expected_block_yields_block_size() {
        let (config, link) = paper_defaults();
        let counts = expected_observables(&config, &link);
        let yield_z = counts.n_total(Basis::Z);
        assert!((yield_z / config.block_size as f64 - 1.0).abs() < 1e-9);
        let total = counts.total_pulses();
        assert!((counts.elapsed_time - total / config.pulse_rate).abs() < 1e-6);
    }

    #[test]
    fn simulate_zero_source_zero_noise_gives_zero_counts() {
        let (mut config, mut link) = paper_defaults();
        config.mu1 = 0.0;
        config.mu2 = 0.0;
        config.block_size = 100;
        link.dark_rate = 0.0;
        link.baseline_noise = 0.0;
        let (counts, truth) = simulate_block(&config, &link, None, 7).unwrap();
        assert_eq!(counts.n_total(Basis::Z), 0.0);
        assert_eq!(counts.n_total(Basis::X), 0.0);
        assert_eq!(counts.m_total(Basis::Z), 0.0);
        assert_eq!(truth.raw_z_detections, 0);
    }

    #[test]
    fn simulate_is_deterministic() {
        let (mut config, link) = paper_defaults();
        config.block_size = 20_000;
        let a = simulate_block(&config, &link, None, 42).unwrap();
        let b = simulate_block(&config, &link, None, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = simulate_block(&config, &link, None, 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn ground_truth_marginals_match_counts_exactly() {
        let (mut config, link) = paper_defaults();
        config.block_size = 50_000;
        for seed in 0..5 {
            let (counts, truth) = simulate_block(&config, &link, None, seed).unwrap();
            for basis in Basis::ALL {
                for i in 0..2 {
                    let b = basis.index();
                    assert_eq!(counts.n_cell(basis, i), sum3(&truth.detections, b, i) as f64);
                    assert_eq!(counts.m_cell(basis, i), sum3(&truth.errors, b, i) as f64);
                    assert_eq!(counts.pulses_cell(basis, i), sum3(&truth.sent, b, i) as f64);
                }
            }
        }
    }

    #[test]
    fn counts_ordering_m_le_n_le_pulses() {
        let (mut config, mut link) = paper_defaults();
        config.block_size = 30_000;
        link.channel_loss = 8.0;
        for seed in 0..10 {
            let (counts, _) = simulate_block(&config, &link, None, seed).unwrap();
            for basis in Basis::ALL {
                for i in 0..2 {
                    let (n, m, p) = (
                        counts.n_cell(basis, i),
                        counts.m_cell(basis, i),
                        counts.pulses_cell(basis, i),
                    );
                    assert!(m <= n && n <= p, "{basis:?} mu{i}: m={m} n={n} p={p}");
                }
            }
            let total = counts.total_pulses();
            assert!((counts.elapsed_time - total / config.pulse_rate).abs() < 1e-9);
        }
    }

    #[test]
    fn simulated_cells_match_expectation_within_5_sigma() {
        let (mut config, link) = paper_defaults();
        config.block_size = 200_000;
        let expected = expected_observables(&config, &link);
        let n_seeds = 20;
        let mut mean = BlockCounts::default();
        for seed in 0..n_seeds {
            let (counts, _) = simulate_block(&config, &link, None, seed).unwrap();
            mean.accumulate(&counts);
        }
        for basis in Basis::ALL {
            for i in 0..2 {
                let e_n = expected.n_cell(basis, i);
                let got = mean.n_cell(basis, i) / n_seeds as f64;
                let sigma = (e_n / n_seeds as f64).sqrt();
                assert!(
                    (got - e_n).abs() < 5.0 * sigma,
                    "{basis:?} mu{i}: got {got}, expected {e_n} ± {sigma}"
                );
            }
        }
    }

    #[test]
    fn saturation_keeps_rates_below_dead_time_ceiling() {
        let (mut config, mut link) = paper_defaults();
        config.block_size = 200_000;
        link.channel_loss = 0.0;
        let (counts, truth) = simulate_block(&config, &link, None, 3).unwrap();
        let rate_z = truth.raw_z_detections as f64 / counts.elapsed_time;
        let rate_x = truth.raw_x_detections as f64 / counts.elapsed_time;
        assert!(rate_z < 1.0 / link.dead_time);
        assert!(rate_x < 1.0 / link.dead_time);
    }

    #[test]
    fn unreachable_block_is_an_explicit_error() {
        let (mut config, mut link) = paper_defaults();
        config.block_size = 1_000_000_000;
        link.channel_loss = 200.0;
        link.dark_rate = 0.0;
        match simulate_block(&config, &link, None, 1) {
            Err(ChannelError::BlockUnreachable { needed, budget }) => {
                assert!(needed > budget);
            }
            other => panic!("expected BlockUnreachable, got {other:?}"),
        }
    }

    #[test]
    fn drift_step_reduces_yield() {
        let (mut config, link) = paper_defaults();
        config.block_size = 50_000;
        let no_drift = simulate_block(&config, &link, None, 5).unwrap().0;
        let drift = DriftProfile {
            loss_steps: vec![LossStep {
                at_s: 0.0,
                delta_db: 5.0,
            }],
            ..Default::default()
        };
        let with_drift = simulate_block(&config, &link, Some(&drift), 5).unwrap().0;
        assert!(with_drift.elapsed_time > no_drift.elapsed_time * 1.2);
    }

    #[test]
    fn drift_profile_clamps_to_physical_ranges() {
        let (_, link) = paper_defaults();
        let drift = DriftProfile {
            loss_amp_db: 100.0,
            loss_period_s: 10.0,
            vis_amp: 2.0,
            vis_period_s: 10.0,
            ..Default::default()
        };
        for t in 0..40 {
            let l = drift.link_at(&link, t as f64);
            assert!(l.channel_loss >= 0.0);
            assert!((0.0..=1.0).contains(&l.visibility_x));
        }
    }

    #[test]
    fn split_seed_decorrelates_indices() {
        let a = split_seed(1234, 0);
        let b = split_seed(1234, 1);
        let c = split_seed(1235, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
