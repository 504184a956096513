//! CSV row types and the writer.
//!
//! Each command has one row struct whose field order is the column order;
//! the first column carries a `name/version` schema tag so downstream
//! tooling can detect layout changes. Serialization goes through the `csv`
//! crate with an auto-generated header row, UTF-8, `\n` line endings.
//! Floats are written in shortest round-trip form, so byte-identical output
//! for identical inputs is guaranteed.

use serde::Serialize;
use std::io::Write;
use std::path::Path;

use crate::HarnessError;

pub const RATE_VS_LOSS_SCHEMA: &str = "rate-vs-loss/1";
pub const RATE_VS_POWER_SCHEMA: &str = "rate-vs-power/1";
pub const STABILITY_SCHEMA: &str = "stability/1";
pub const SESSION_SCHEMA: &str = "session/1";

/// One loss point of a rate-vs-loss sweep, averaged over its blocks.
#[derive(Clone, Debug, Serialize)]
pub struct RateVsLossRow {
    pub schema: &'static str,
    pub mode: &'static str,
    pub loss_db: f64,
    /// Blocks (or sessions) evaluated at this point.
    pub blocks: u32,
    /// Mean secret key rate, bit/s.
    pub skr: f64,
    /// Sample standard deviation of the per-block rate (0 for one block).
    pub skr_std: f64,
    /// Mean extractable key length per block, bits.
    pub key_length: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub n_z: f64,
    pub m_z: f64,
    pub n_x: f64,
    pub m_x: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub s_z0_low: f64,
    pub s_z0_up: f64,
    pub s_z1_low: f64,
    pub s_x1_low: f64,
    pub v_x1_up: f64,
    pub phi_z_up: f64,
    pub lambda_ec: f64,
    pub elapsed_s: f64,
    /// Why the key length is zero; empty when a key was extracted.
    pub zero_reason: String,
}

/// One classical-power point of a rate-vs-power sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RateVsPowerRow {
    pub schema: &'static str,
    pub mode: &'static str,
    pub sync: &'static str,
    pub classical_power_dbm: f64,
    pub blocks: u32,
    pub skr: f64,
    pub skr_std: f64,
    pub key_length: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Interference visibility that would produce the observed X error
    /// rate on its own: `1 - 2·qber_x`.
    pub visibility_equiv: f64,
    pub n_z: f64,
    pub m_z: f64,
    pub n_x: f64,
    pub m_x: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub s_z0_low: f64,
    pub s_z0_up: f64,
    pub s_z1_low: f64,
    pub s_x1_low: f64,
    pub v_x1_up: f64,
    pub phi_z_up: f64,
    pub lambda_ec: f64,
    pub elapsed_s: f64,
    pub zero_reason: String,
}

/// One averaging interval of a stability run.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub schema: &'static str,
    pub mode: &'static str,
    pub t_start_s: f64,
    pub t_end_s: f64,
    /// Channel loss at the interval midpoint, drift applied.
    pub loss_db: f64,
    /// Interferometer visibility at the interval midpoint, drift applied.
    pub visibility_x: f64,
    /// Pre-sifting Z-detector click rate, Hz.
    pub raw_z_rate_hz: f64,
    /// Sifted Z-detection rate, Hz.
    pub sift_z_rate_hz: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Key length the interval's statistics sustain at the configured
    /// block size, bits.
    pub key_length: u64,
    /// Secret key rate at the configured block size, bit/s.
    pub skr: f64,
    /// Sifted Z detections inside the interval.
    pub n_z: f64,
    /// Sifted X detections inside the interval.
    pub n_x: f64,
    pub zero_reason: String,
}

/// Summary of one full two-party session.
#[derive(Clone, Debug, Serialize)]
pub struct SessionRow {
    pub schema: &'static str,
    pub transport: &'static str,
    pub seed: u64,
    pub loss_db: f64,
    /// Sifted Z-detection target of the block.
    pub block_size: u64,
    /// Sifted Z∩Z count re-derived from the transcript.
    pub sifted_z: u64,
    pub qber_z: f64,
    /// Extractable length from the finite-key bound, bits.
    pub report_key_length: u64,
    /// Bits actually written to the key files.
    pub final_key_bits: u64,
    /// `final_key_bits` over the block's elapsed transmission time, bit/s.
    pub skr: f64,
    pub elapsed_s: f64,
    pub sample_bits: u64,
    pub grant_bits: u64,
    pub tag_bits: u8,
    pub lambda_ec: f64,
    pub transcript_bytes: u64,
    pub audit_ok: bool,
    pub keys_match: bool,
}

/// Serializes rows to one CSV document (header + rows, `\n` endings).
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    Ok(writer
        .into_inner()
        .map_err(|e| HarnessError::Config(format!("csv buffer flush failed: {e}")))?)
}

/// Writes rows to `out`, or to standard output when `out` is `None`.
pub fn write_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<(), HarnessError> {
    let bytes = csv_bytes(rows)?;
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_row() -> RateVsLossRow {
        RateVsLossRow {
            schema: RATE_VS_LOSS_SCHEMA,
            mode: "analytic",
            loss_db: 21.0,
            blocks: 1,
            skr: 4530.0,
            skr_std: 0.0,
            key_length: 1.38e8,
            qber_z: 0.0209,
            qber_x: 0.0434,
            n_z: 1e9,
            m_z: 2.09e7,
            n_x: 1.23e7,
            m_x: 5.3e5,
            tau0: 0.7228,
            tau1: 0.2292,
            s_z0_low: 1.9e7,
            s_z0_up: 2.2e7,
            s_z1_low: 5.5e8,
            s_x1_low: 1.0e7,
            v_x1_up: 5.6e5,
            phi_z_up: 0.0899,
            lambda_ec: 1.7e8,
            elapsed_s: 30463.6,
            zero_reason: String::new(),
        }
    }

    #[test]
    fn loss_header_is_frozen() {
        let bytes = csv_bytes(&[loss_row()]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "schema,mode,loss_db,blocks,skr,skr_std,key_length,qber_z,qber_x,\
             n_z,m_z,n_x,m_x,tau0,tau1,s_z0_low,s_z0_up,s_z1_low,s_x1_low,\
             v_x1_up,phi_z_up,lambda_ec,elapsed_s,zero_reason"
        );
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn power_header_is_frozen() {
        let row = RateVsPowerRow {
            schema: RATE_VS_POWER_SCHEMA,
            mode: "analytic",
            sync: "electrical",
            classical_power_dbm: -29.0,
            blocks: 1,
            skr: 1601.4,
            skr_std: 0.0,
            key_length: 4.8e7,
            qber_z: 0.024,
            qber_x: 0.05,
            visibility_equiv: 0.9,
            n_z: 1e9,
            m_z: 2.4e7,
            n_x: 1.2e7,
            m_x: 6.0e5,
            tau0: 0.7228,
            tau1: 0.2292,
            s_z0_low: 2.5e7,
            s_z0_up: 3.0e7,
            s_z1_low: 5.4e8,
            s_x1_low: 1.0e7,
            v_x1_up: 6.4e5,
            phi_z_up: 0.1,
            lambda_ec: 1.9e8,
            elapsed_s: 30000.0,
            zero_reason: String::new(),
        };
        let text = String::from_utf8(csv_bytes(&[row]).unwrap()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "schema,mode,sync,classical_power_dbm,blocks,skr,skr_std,key_length,\
             qber_z,qber_x,visibility_equiv,n_z,m_z,n_x,m_x,tau0,tau1,s_z0_low,\
             s_z0_up,s_z1_low,s_x1_low,v_x1_up,phi_z_up,lambda_ec,elapsed_s,zero_reason"
        );
    }

    #[test]
    fn stability_header_is_frozen() {
        let row = StabilityRow {
            schema: STABILITY_SCHEMA,
            mode: "mc",
            t_start_s: 0.0,
            t_end_s: 600.0,
            loss_db: 21.0,
            visibility_x: 0.938,
            raw_z_rate_hz: 37106.8,
            sift_z_rate_hz: 32380.0,
            qber_z: 0.0209,
            qber_x: 0.0434,
            key_length: 138_000_000,
            skr: 4530.0,
            n_z: 1.94e7,
            n_x: 2.4e5,
            zero_reason: String::new(),
        };
        let text = String::from_utf8(csv_bytes(&[row]).unwrap()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "schema,mode,t_start_s,t_end_s,loss_db,visibility_x,raw_z_rate_hz,\
             sift_z_rate_hz,qber_z,qber_x,key_length,skr,n_z,n_x,zero_reason"
        );
    }

    #[test]
    fn session_header_is_frozen() {
        let row = SessionRow {
            schema: SESSION_SCHEMA,
            transport: "memory",
            seed: 1,
            loss_db: 10.0,
            block_size: 200_000,
            sifted_z: 200_123,
            qber_z: 0.0201,
            report_key_length: 11_075,
            final_key_bits: 11_075,
            skr: 610.0,
            elapsed_s: 18.2,
            sample_bits: 4_002,
            grant_bits: 196_121,
            tag_bits: 31,
            lambda_ec: 32_000.0,
            transcript_bytes: 1_234_567,
            audit_ok: true,
            keys_match: true,
        };
        let text = String::from_utf8(csv_bytes(&[row]).unwrap()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "schema,transport,seed,loss_db,block_size,sifted_z,qber_z,\
             report_key_length,final_key_bits,skr,elapsed_s,sample_bits,\
             grant_bits,tag_bits,lambda_ec,transcript_bytes,audit_ok,keys_match"
        );
    }

    #[test]
    fn csv_output_is_deterministic() {
        let rows = vec![loss_row(), loss_row()];
        assert_eq!(csv_bytes(&rows).unwrap(), csv_bytes(&rows).unwrap());
    }

    #[test]
    fn reason_with_comma_is_quoted() {
        let mut row = loss_row();
        row.zero_reason = "a,b".into();
        let text = String::from_utf8(csv_bytes(&[row]).unwrap()).unwrap();
        assert!(text.contains("\"a,b\""));
    }
}
