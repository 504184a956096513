//! One-decoy finite-key analysis.
//!
//! Turns the per-block detection and error counts of [`BlockCounts`] into a
//! secret key length. The chain is: Hoeffding concentration on the observed
//! cells, decoy-state bounds on the vacuum and single-photon yields, a
//! phase-error upper bound transferred from the check basis, error-correction
//! leakage, and finally the key-length formula. Every intermediate is
//! reported, every clamp is flagged, and a zeroed key always carries a
//! reason.
//!
//! All functions are pure and safe to evaluate concurrently across sweep
//! points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{Basis, BlockCounts};
use crate::model::ProtocolConfig;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error, PartialEq)]
pub enum FiniteKeyError {
    #[error("degenerate decoy: mu1 must exceed mu2 (mu1={mu1}, mu2={mu2})")]
    DegenerateDecoy { mu1: f64, mu2: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient X statistics: s_x1_low is not positive")]
    InsufficientX,
}

/// Why a report's key length is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroReason {
    /// No sifted Z detections at all.
    EmptyBlock,
    /// The single-photon bound in the check basis vanished, so the phase
    /// error cannot be bounded away from 1/2.
    InsufficientX,
    /// The observed Z error rate or the phase-error bound reached 1/2.
    QberTooHigh,
    /// The entropy budget went non-positive (leakage and finite-size terms
    /// exceed the bounded yield).
    NoYield,
}

impl std::fmt::Display for ZeroReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ZeroReason::EmptyBlock => "empty-block",
            ZeroReason::InsufficientX => "insufficient-x",
            ZeroReason::QberTooHigh => "qber-too-high",
            ZeroReason::NoYield => "no-yield",
        };
        f.write_str(s)
    }
}

/// Which clamps fired while evaluating the bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampFlags {
    pub s_z0_low_clamped: bool,
    pub s_z1_low_clamped: bool,
    pub s_x1_low_clamped: bool,
    pub v_x1_clamped: bool,
    pub phi_capped: bool,
    pub lambda_clamped: bool,
    pub key_clamped: bool,
}

/// Full output of the finite-key evaluation of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyLengthReport {
    pub tau0: f64,
    pub tau1: f64,
    pub s_z0_low: f64,
    pub s_z0_up: f64,
    pub s_z1_low: f64,
    pub s_x1_low: f64,
    pub v_x1_up: f64,
    pub phi_z_up: f64,
    pub lambda_ec: f64,
    /// Extractable secret key length ℓ, bits.
    pub key_length: u64,
    /// ℓ divided by the block's elapsed time, bit/s.
    pub skr: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub n_z_total: f64,
    pub m_z_total: f64,
    pub n_x_total: f64,
    pub m_x_total: f64,
    pub elapsed_time: f64,
    pub clamps: ClampFlags,
    pub zero_reason: Option<ZeroReason>,
}

/// Binary entropy `h(p) = -p·log2(p) - (1-p)·log2(1-p)`, with h(0)=h(1)=0.
pub fn binary_entropy(p: f64) -> Result<f64, FiniteKeyError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FiniteKeyError::Domain(format!(
            "binary_entropy requires p in [0,1], got {p}"
        )));
    }
    Ok(h2(p))
}

fn h2(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

/// Hoeffding deviation `δ = sqrt((n/2)·ln(1/eps))` for a count observed `n`
/// times at failure probability `eps`.
pub fn hoeffding_delta(n: f64, eps: f64) -> Result<f64, FiniteKeyError> {
    if !(n >= 0.0) {
        return Err(FiniteKeyError::Domain(format!(
            "hoeffding_delta requires n >= 0, got {n}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(FiniteKeyError::Domain(format!(
            "hoeffding_delta requires eps in (0,1), got {eps}"
        )));
    }
    Ok((n / 2.0 * (1.0 / eps).ln()).sqrt())
}

/// Poisson mixture weight `τ_n = Σ_μ p_μ·e^(-μ)·μ^n/n!` over the two
/// intensities of `config`.
pub fn tau_n(n: u32, config: &ProtocolConfig) -> f64 {
    let mut total = 0.0;
    for (mu, p_mu) in [(config.mu1, config.p_mu1), (config.mu2, config.p_mu2)] {
        let mut term = (-mu).exp();
        for i in 1..=n {
            term *= mu / i as f64;
        }
        total += p_mu * term;
    }
    total
}

fn require_decoy_structure(config: &ProtocolConfig) -> Result<(), FiniteKeyError> {
    if !(config.mu1 > config.mu2) {
        return Err(FiniteKeyError::DegenerateDecoy {
            mu1: config.mu1,
            mu2: config.mu2,
        });
    }
    if !(config.mu2 > 0.0) {
        return Err(FiniteKeyError::Domain(format!(
            "one-decoy bounds require mu2 > 0, got {}",
            config.mu2
        )));
    }
    Ok(())
}

/// Hoeffding-shifted, intensity-normalized counts of one basis.
struct ScaledCounts {
    m_total: f64,
    /// `(e^μ1/p_μ1)·(n_μ1 + δ)`
    n_plus_1: f64,
    /// `(e^μ2/p_μ2)·max(0, n_μ2 - δ)`
    n_minus_2: f64,
    m_plus_1: f64,
    m_minus_2: f64,
}

fn scaled_counts(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    eps: f64,
    basis: Basis,
) -> Result<ScaledCounts, FiniteKeyError> {
    let n1 = counts.n_cell(basis, 0);
    let n2 = counts.n_cell(basis, 1);
    let m1 = counts.m_cell(basis, 0);
    let m2 = counts.m_cell(basis, 1);
    let n_total = n1 + n2;
    let m_total = m1 + m2;
    let dn = hoeffding_delta(n_total, eps)?;
    let dm = hoeffding_delta(m_total, eps)?;
    let scale1 = config.mu1.exp() / config.p_mu1;
    let scale2 = config.mu2.exp() / config.p_mu2;
    Ok(ScaledCounts {
        m_total,
        n_plus_1: scale1 * (n1 + dn),
        n_minus_2: scale2 * (n2 - dn).max(0.0),
        m_plus_1: scale1 * (m1 + dm),
        m_minus_2: scale2 * (m2 - dm).max(0.0),
    })
}

fn vacuum_bounds_impl(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    eps: f64,
    basis: Basis,
) -> Result<(f64, f64, bool), FiniteKeyError> {
    require_decoy_structure(config)?;
    let sc = scaled_counts(counts, config, eps, basis)?;
    let tau0 = tau_n(0, config);
    let dm = hoeffding_delta(sc.m_total, eps)?;
    let up = 2.0 * (sc.m_total + dm);
    let central =
        2.0 * tau0 * (config.mu1 * sc.m_minus_2 - config.mu2 * sc.m_plus_1)
            / (config.mu1 - config.mu2);
    let clamped = central < 0.0;
    Ok((central.max(0.0), up, clamped))
}

/// One-decoy bounds on the vacuum detections of `basis`:
/// `(s_0_low, s_0_up)`.
pub fn vacuum_bounds(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    eps: f64,
    basis: Basis,
) -> Result<(f64, f64), FiniteKeyError> {
    let (low, up, _) = vacuum_bounds_impl(counts, config, eps, basis)?;
    Ok((low, up))
}

fn single_photon_bound_impl(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    s_0_up: f64,
    eps: f64,
    basis: Basis,
) -> Result<(f64, bool), FiniteKeyError> {
    require_decoy_structure(config)?;
    let sc = scaled_counts(counts, config, eps, basis)?;
    let tau0 = tau_n(0, config);
    let tau1 = tau_n(1, config);
    let mu1 = config.mu1;
    let mu2 = config.mu2;
    let central = tau1 * mu1 / (mu2 * (mu1 - mu2))
        * (sc.n_minus_2
            - (mu2 * mu2) / (mu1 * mu1) * sc.n_plus_1
            - (mu1 * mu1 - mu2 * mu2) / (mu1 * mu1) * s_0_up / tau0);
    let clamped = central < 0.0;
    Ok((central.max(0.0), clamped))
}

/// One-decoy lower bound on the single-photon detections of `basis`, using
/// the matching vacuum upper bound `s_0_up`.
pub fn single_photon_bound(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    s_0_up: f64,
    eps: f64,
    basis: Basis,
) -> Result<f64, FiniteKeyError> {
    let (low, _) = single_photon_bound_impl(counts, config, s_0_up, eps, basis)?;
    Ok(low)
}

fn x_error_bound_impl(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    s_x1_low: f64,
    eps: f64,
) -> Result<(f64, bool), FiniteKeyError> {
    require_decoy_structure(config)?;
    let sc = scaled_counts(counts, config, eps, Basis::X)?;
    let tau1 = tau_n(1, config);
    let central = tau1 * (sc.m_plus_1 - sc.m_minus_2) / (config.mu1 - config.mu2);
    let v = central.clamp(0.0, s_x1_low.max(0.0));
    Ok((v, v != central))
}

/// One-decoy upper bound on single-photon errors in the check basis,
/// clamped to `[0, s_x1_low]`.
pub fn x_error_upper_bound(
    counts: &BlockCounts,
    config: &ProtocolConfig,
    s_x1_low: f64,
    eps: f64,
) -> Result<f64, FiniteKeyError> {
    let (v, _) = x_error_bound_impl(counts, config, s_x1_low, eps)?;
    Ok(v)
}

/// Statistical penalty of transferring the check-basis error ratio to the
/// key basis. Returns `+inf` when the sample sizes cannot support the bound
/// at all (callers cap the phase error at 1/2).
fn gamma_penalty(a: f64, b: f64, c: f64, d: f64) -> f64 {
    if !(b > 0.0 && b < 1.0) || !(c > 0.0) || !(d > 0.0) {
        return f64::INFINITY;
    }
    let t1 = (c + d) * (1.0 - b) * b / (c * d * LN2);
    let arg = (c + d) / (c * d * (1.0 - b) * b) * (21.0 / a) * (21.0 / a);
    if !t1.is_finite() || !(arg > 1.0) {
        return f64::INFINITY;
    }
    (t1 * arg.log2()).sqrt()
}

/// Upper bound on the Z-basis phase error ratio: the observed check-basis
/// single-photon error ratio plus the finite-statistics penalty, capped at
/// 1/2.
pub fn phase_error_bound(
    s_z1_low: f64,
    s_x1_low: f64,
    v_x1_up: f64,
    eps_sec: f64,
) -> Result<f64, FiniteKeyError> {
    if !(s_x1_low > 0.0) {
        return Err(FiniteKeyError::InsufficientX);
    }
    let ratio = (v_x1_up / s_x1_low).clamp(0.0, 1.0);
    let b_eff = ratio.max(1.0 / s_x1_low).min(0.5);
    let phi = ratio + gamma_penalty(eps_sec, b_eff, s_z1_low, s_x1_low);
    Ok(phi.min(0.5))
}

/// Error-correction leakage `λ_EC = f_ec·n_z·h(qber_z)`, clamped to `n_z`.
pub fn ec_leakage(n_z: f64, qber_z: f64, f_ec: f64) -> f64 {
    let q = qber_z.clamp(0.0, 0.5);
    (f_ec * n_z * h2(q)).min(n_z)
}

/// Evaluates the full finite-key chain on one block.
///
/// Statistical failure modes (no X statistics, error rates at 1/2, negative
/// entropy budget) yield `key_length = 0` with a [`ZeroReason`]; only
/// structurally invalid configurations (degenerate decoy intensities) are
/// errors.
pub fn secret_key_length(
    counts: &BlockCounts,
    config: &ProtocolConfig,
) -> Result<KeyLengthReport, FiniteKeyError> {
    require_decoy_structure(config)?;
    let eps = config.eps_sec;
    let mut clamps = ClampFlags::default();

    let (s_z0_low, s_z0_up, c_z0) = vacuum_bounds_impl(counts, config, eps, Basis::Z)?;
    clamps.s_z0_low_clamped = c_z0;
    let (_, s_x0_up, _) = vacuum_bounds_impl(counts, config, eps, Basis::X)?;
    let (s_z1_low, c_z1) = single_photon_bound_impl(counts, config, s_z0_up, eps, Basis::Z)?;
    clamps.s_z1_low_clamped = c_z1;
    let (s_x1_low, c_x1) = single_photon_bound_impl(counts, config, s_x0_up, eps, Basis::X)?;
    clamps.s_x1_low_clamped = c_x1;
    let (v_x1_up, c_v) = x_error_bound_impl(counts, config, s_x1_low, eps)?;
    clamps.v_x1_clamped = c_v;

    let (phi_z_up, x_ok) = match phase_error_bound(s_z1_low, s_x1_low, v_x1_up, eps) {
        Ok(phi) => (phi, true),
        Err(FiniteKeyError::InsufficientX) => (0.5, false),
        Err(other) => return Err(other),
    };
    clamps.phi_capped = phi_z_up >= 0.5;

    let n_z_total = counts.n_total(Basis::Z);
    let qber_z = counts.qber_z();
    let lambda_ec = ec_leakage(n_z_total, qber_z, config.f_ec);
    clamps.lambda_clamped = lambda_ec >= n_z_total && n_z_total > 0.0;

    let budget = s_z0_low + s_z1_low * (1.0 - h2(phi_z_up))
        - lambda_ec
        - 6.0 * (19.0 / config.eps_sec).log2()
        - (2.0 / config.eps_cor).log2();

    let zero_reason = if n_z_total <= 0.0 {
        Some(ZeroReason::EmptyBlock)
    } else if !x_ok {
        Some(ZeroReason::InsufficientX)
    } else if qber_z >= 0.5 || phi_z_up >= 0.5 {
        Some(ZeroReason::QberTooHigh)
    } else if budget < 1.0 {
        Some(ZeroReason::NoYield)
    } else {
        None
    };

    let mut key_length = if zero_reason.is_some() {
        0
    } else {
        budget.floor().max(0.0) as u64
    };
    if key_length as f64 > n_z_total {
        key_length = n_z_total as u64;
        clamps.key_clamped = true;
    }
    let skr = if counts.elapsed_time > 0.0 {
        key_length as f64 / counts.elapsed_time
    } else {
        0.0
    };

    Ok(KeyLengthReport {
        tau0: tau_n(0, config),
        tau1: tau_n(1, config),
        s_z0_low,
        s_z0_up,
        s_z1_low,
        s_x1_low,
        v_x1_up,
        phi_z_up,
        lambda_ec,
        key_length,
        skr,
        qber_z,
        qber_x: counts.qber_x(),
        n_z_total,
        m_z_total: counts.m_total(Basis::Z),
        n_x_total: counts.n_total(Basis::X),
        m_x_total: counts.m_total(Basis::X),
        elapsed_time: counts.elapsed_time,
        clamps,
        zero_reason,
    })
}
