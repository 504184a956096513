//! Decibel and power-unit conversions.
//!
//! Every dB↔linear and dBm↔mW conversion in the workspace goes through these
//! four functions so that no module can disagree about sign conventions.

/// Converts a power level in dBm to milliwatts: `P_mW = 10^(dBm/10)`.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Converts a power in milliwatts to dBm. Zero maps to `-inf` (dark fiber).
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Converts an attenuation in dB to a linear transmittance: `T = 10^(-dB/10)`.
pub fn db_to_transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Converts a linear transmittance to an attenuation in dB.
pub fn transmittance_to_db(t: f64) -> f64 {
    -10.0 * t.log10()
}
