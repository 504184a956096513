//! Protocol and link parameter sets, validation, and the on-disk config format.
//!
//! `ProtocolConfig` holds everything the transmitter protocol fixes (basis and
//! intensity probabilities, pulse rate, security budget, block policy);
//! `LinkModel` holds everything the physical channel and receiver contribute
//! (loss, detector parameters, noise sources, synchronization mode). Both are
//! plain data: they are validated once by [`validate`] and treated as
//! immutable afterwards.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::units::dbm_to_mw;

/// Version tag written into every config file.
pub const SCHEMA_VERSION: u32 = 1;

/// Calibrated intrinsic Z-basis error probability of the reference setup.
pub const CAL_E_INTRINSIC_Z: f64 = 0.020069859046205084;
/// Calibrated interferometer visibility of the reference setup.
pub const CAL_VISIBILITY_X: f64 = 0.9383885347165615;
/// Calibrated background counts/s per mW of co-propagating classical light.
pub const CAL_CROSSTALK_COEFF: f64 = 6459458.79796775;
/// Calibrated in-band rejection of the optical-sync pattern relative to an
/// equal-power CW source, dB.
pub const CAL_SYNC_REJECTION_DB: f64 = 4.253472664252687;
/// Fraction of each slot's background admitted by the detection window.
pub const CAL_GATE_DUTY: f64 = 0.09;
/// Sync pattern rate of the reference setup, bit/s.
pub const SYNC_PATTERN_RATE_BPS: f64 = 0.145e6;

/// Transmitter-side protocol parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Quantum-state repetition rate ν, Hz.
    pub pulse_rate: f64,
    /// Probability that Alice encodes in the Z (key) basis.
    pub p_z_alice: f64,
    /// Probability that Alice encodes in the X (check) basis.
    pub p_x_alice: f64,
    /// Signal mean photon number per pulse.
    pub mu1: f64,
    /// Decoy mean photon number per pulse (`mu1 > mu2 >= 0`).
    pub mu2: f64,
    /// Probability of sending intensity `mu1`.
    pub p_mu1: f64,
    /// Probability of sending intensity `mu2`.
    pub p_mu2: f64,
    /// Secrecy failure probability ε_sec.
    pub eps_sec: f64,
    /// Correctness failure probability ε_cor.
    pub eps_cor: f64,
    /// Sifted Z-basis detections accumulated per analysis block.
    pub block_size: u64,
    /// Error-correction efficiency factor (≥ 1).
    pub f_ec: f64,
}

/// Channel, receiver, and noise parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Fiber channel attenuation, dB.
    pub channel_loss: f64,
    /// Probability of the Z path at Bob's passive splitter.
    pub bob_p_z: f64,
    /// Probability of the X path at Bob's passive splitter.
    pub bob_p_x: f64,
    /// Z-path receiver transmission (after the splitter).
    pub eta_receiver_z: f64,
    /// X-path receiver transmission (after the splitter).
    pub eta_receiver_x: f64,
    /// Detector efficiency, shared by both detectors.
    pub eta_detector: f64,
    /// Dark counts per second per detector.
    pub dark_rate: f64,
    /// Detector dead time, seconds.
    pub dead_time: f64,
    /// Intrinsic Z-basis optical error probability.
    pub e_intrinsic_z: f64,
    /// Interferometer visibility V; the intrinsic X error rate is (1-V)/2.
    pub visibility_x: f64,
    /// Background counts/s per mW of classical light reaching the filter band.
    pub crosstalk_coeff: f64,
    /// Launch power of co-propagating classical light, dBm. `None` = dark fiber.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classical_power: Option<f64>,
    /// Background counts/s independent of co-propagated light.
    pub baseline_noise: f64,
    /// Fraction of each slot within which a background count is accepted as a
    /// detection of that slot (detection-window duty cycle). Signal photons
    /// are unaffected; the full background still drives detector saturation.
    pub gate_duty: f64,
    /// Clock-recovery mode.
    pub sync: SyncMode,
}

/// How Bob recovers Alice's clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyncMode {
    /// Shared electrical clock; nothing extra in the fiber.
    Electrical,
    /// Optical clock pattern co-propagating in the fiber. Its in-band
    /// contribution is the launch power attenuated by `rejection_db`, added
    /// to the classical-power budget of the crosstalk term.
    Optical {
        launch_power_dbm: f64,
        pattern_rate_bps: f64,
        rejection_db: f64,
    },
}

impl Default for SyncMode {
    fn default() -> Self {
        SyncMode::Electrical
    }
}

impl SyncMode {
    /// Reference-setup optical synchronization at the given launch power.
    pub fn optical(launch_power_dbm: f64) -> Self {
        SyncMode::Optical {
            launch_power_dbm,
            pattern_rate_bps: SYNC_PATTERN_RATE_BPS,
            rejection_db: CAL_SYNC_REJECTION_DB,
        }
    }
}

/// One violated invariant, named after the field(s) it constrains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Short stable identifier, e.g. `"mu_ordering"`.
    pub name: &'static str,
    /// Human-readable description of the violation.
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("unsupported schema_version {found} (this build reads version {supported})")]
    SchemaVersion { found: u32, supported: u32 },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn check_prob(out: &mut Vec<Violation>, name: &'static str, value: f64) {
    if !(0.0..=1.0).contains(&value) {
        out.push(Violation {
            name,
            detail: format!("probability out of range: {value}"),
        });
    }
}

fn check_nonneg(out: &mut Vec<Violation>, name: &'static str, value: f64) {
    if !(value >= 0.0) {
        out.push(Violation {
            name,
            detail: format!("must be >= 0, got {value}"),
        });
    }
}

fn check_finite(out: &mut Vec<Violation>, name: &'static str, value: f64) {
    if !value.is_finite() {
        out.push(Violation {
            name,
            detail: format!("must be finite, got {value}"),
        });
    }
}

/// Checks every invariant of the pair and returns the complete list of
/// violations, not just the first. NaN or infinite values are reported as
/// violations rather than panicking.
pub fn validate(config: &ProtocolConfig, link: &LinkModel) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();

    check_finite(&mut v, "pulse_rate", config.pulse_rate);
    if !(config.pulse_rate > 0.0) {
        v.push(Violation {
            name: "pulse_rate",
            detail: format!("must be > 0, got {}", config.pulse_rate),
        });
    }
    check_prob(&mut v, "p_z_alice", config.p_z_alice);
    check_prob(&mut v, "p_x_alice", config.p_x_alice);
    if !(config.p_z_alice > 0.0 && config.p_z_alice < 1.0) {
        v.push(Violation {
            name: "p_z_alice",
            detail: format!("must lie strictly inside (0,1), got {}", config.p_z_alice),
        });
    }
    if (config.p_z_alice + config.p_x_alice - 1.0).abs() > 1e-9 {
        v.push(Violation {
            name: "alice_basis_sum",
            detail: format!(
                "p_z_alice + p_x_alice must equal 1, got {}",
                config.p_z_alice + config.p_x_alice
            ),
        });
    }
    check_finite(&mut v, "mu1", config.mu1);
    check_finite(&mut v, "mu2", config.mu2);
    if !(config.mu1 > config.mu2) {
        v.push(Violation {
            name: "mu_ordering",
            detail: format!("mu1 must exceed mu2, got mu1={} mu2={}", config.mu1, config.mu2),
        });
    }
    if !(config.mu2 >= 0.0) {
        v.push(Violation {
            name: "mu2",
            detail: format!("must be >= 0, got {}", config.mu2),
        });
    }
    check_prob(&mut v, "p_mu1", config.p_mu1);
    check_prob(&mut v, "p_mu2", config.p_mu2);
    if (config.p_mu1 + config.p_mu2 - 1.0).abs() > 1e-9 {
        v.push(Violation {
            name: "intensity_prob_sum",
            detail: format!(
                "p_mu1 + p_mu2 must equal 1, got {}",
                config.p_mu1 + config.p_mu2
            ),
        });
    }
    for (name, eps) in [("eps_sec", config.eps_sec), ("eps_cor", config.eps_cor)] {
        if !(eps > 0.0 && eps < 1.0) {
            v.push(Violation {
                name,
                detail: format!("must lie strictly inside (0,1), got {eps}"),
            });
        }
    }
    if config.block_size < 1 {
        v.push(Violation {
            name: "block_size",
            detail: "must be >= 1".into(),
        });
    }
    if !(config.f_ec >= 1.0) {
        v.push(Violation {
            name: "f_ec",
            detail: format!("must be >= 1, got {}", config.f_ec),
        });
    }

    check_finite(&mut v, "channel_loss", link.channel_loss);
    check_nonneg(&mut v, "channel_loss", link.channel_loss);
    check_prob(&mut v, "bob_p_z", link.bob_p_z);
    check_prob(&mut v, "bob_p_x", link.bob_p_x);
    if (link.bob_p_z + link.bob_p_x - 1.0).abs() > 1e-9 {
        v.push(Violation {
            name: "bob_basis_sum",
            detail: format!(
                "bob_p_z + bob_p_x must equal 1, got {}",
                link.bob_p_z + link.bob_p_x
            ),
        });
    }
    check_prob(&mut v, "eta_receiver_z", link.eta_receiver_z);
    check_prob(&mut v, "eta_receiver_x", link.eta_receiver_x);
    check_prob(&mut v, "eta_detector", link.eta_detector);
    check_finite(&mut v, "dark_rate", link.dark_rate);
    check_nonneg(&mut v, "dark_rate", link.dark_rate);
    check_finite(&mut v, "dead_time", link.dead_time);
    check_nonneg(&mut v, "dead_time", link.dead_time);
    check_prob(&mut v, "e_intrinsic_z", link.e_intrinsic_z);
    check_prob(&mut v, "visibility_x", link.visibility_x);
    check_finite(&mut v, "crosstalk_coeff", link.crosstalk_coeff);
    check_nonneg(&mut v, "crosstalk_coeff", link.crosstalk_coeff);
    if let Some(p) = link.classical_power {
        if p.is_nan() || p == f64::INFINITY {
            v.push(Violation {
                name: "classical_power",
                detail: format!("must be a finite dBm level or -inf, got {p}"),
            });
        }
    }
    check_finite(&mut v, "baseline_noise", link.baseline_noise);
    check_nonneg(&mut v, "baseline_noise", link.baseline_noise);
    check_prob(&mut v, "gate_duty", link.gate_duty);
    if let SyncMode::Optical {
        launch_power_dbm,
        pattern_rate_bps,
        rejection_db,
    } = link.sync
    {
        if !launch_power_dbm.is_finite() {
            v.push(Violation {
                name: "sync_launch_power",
                detail: format!("optical launch power must be finite, got {launch_power_dbm}"),
            });
        }
        if !(pattern_rate_bps > 0.0) {
            v.push(Violation {
                name: "sync_pattern_rate",
                detail: format!("pattern_rate must be > 0, got {pattern_rate_bps}"),
            });
        }
        check_finite(&mut v, "sync_rejection_db", rejection_db);
        check_nonneg(&mut v, "sync_rejection_db", rejection_db);
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// The calibrated reference parameter set: 21 dB channel, 595 MHz source,
/// μ₁/μ₂ = 0.41/0.15 at 0.7/0.3, basis probability 0.9 on both sides,
/// ε_sec = ε_cor = 10⁻⁹, 10⁹-bit blocks, 2700 Hz dark counts, 20 μs dead
/// time, 20% detectors behind 0.5/0.28 receiver paths, dark fiber,
/// electrical synchronization.
pub fn paper_defaults() -> (ProtocolConfig, LinkModel) {
    let config = ProtocolConfig {
        pulse_rate: 595e6,
        p_z_alice: 0.9,
        p_x_alice: 0.1,
        mu1: 0.41,
        mu2: 0.15,
        p_mu1: 0.7,
        p_mu2: 0.3,
        eps_sec: 1e-9,
        eps_cor: 1e-9,
        block_size: 1_000_000_000,
        f_ec: 1.16,
    };
    let link = LinkModel {
        channel_loss: 21.0,
        bob_p_z: 0.9,
        bob_p_x: 0.1,
        eta_receiver_z: 0.5,
        eta_receiver_x: 0.28,
        eta_detector: 0.2,
        dark_rate: 2700.0,
        dead_time: 20e-6,
        e_intrinsic_z: CAL_E_INTRINSIC_Z,
        visibility_x: CAL_VISIBILITY_X,
        crosstalk_coeff: CAL_CROSSTALK_COEFF,
        classical_power: None,
        baseline_noise: 0.0,
        gate_duty: CAL_GATE_DUTY,
        sync: SyncMode::Electrical,
    };
    (config, link)
}

impl LinkModel {
    /// Total classical power reaching the quantum-channel filter band, mW:
    /// the CW classical carrier plus the in-band residue of an optical sync
    /// pattern, if present.
    pub fn effective_classical_mw(&self) -> f64 {
        let mut mw = match self.classical_power {
            Some(dbm) => dbm_to_mw(dbm),
            None => 0.0,
        };
        if let SyncMode::Optical {
            launch_power_dbm,
            rejection_db,
            ..
        } = self.sync
        {
            mw += dbm_to_mw(launch_power_dbm - rejection_db);
        }
        mw
    }
}

/// On-disk configuration: a versioned TOML document holding both parameter
/// sets. All fields round-trip losslessly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub protocol: ProtocolConfig,
    pub link: LinkModel,
}

impl ConfigFile {
    pub fn new(protocol: ProtocolConfig, link: LinkModel) -> Self {
        ConfigFile {
            schema_version: SCHEMA_VERSION,
            protocol,
            link,
        }
    }

    pub fn defaults() -> Self {
        let (protocol, link) = paper_defaults();
        Self::new(protocol, link)
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let file: ConfigFile = toml::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(ModelError::SchemaVersion {
                found: file.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(file)
    }

    pub fn to_toml(&self) -> Result<String, ModelError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Validates the contained pair, returning it on success.
    pub fn validated(self) -> Result<(ProtocolConfig, LinkModel), ModelError> {
        validate(&self.protocol, &self.link).map_err(ModelError::Invalid)?;
        Ok((self.protocol, self.link))
    }
}
