//! Parameter sweeps: secret key rate versus channel loss and versus
//! co-propagating classical launch power.
//!
//! A sweep walks a fixed grid and evaluates every point in one of three
//! modes: closed-form expectations, seeded Monte-Carlo blocks, or full
//! two-party sessions. Points are independent and evaluated concurrently;
//! per-point seeds come from counter-splitting the master seed, so the
//! emitted rows are identical whatever the thread schedule.

use rayon::prelude::*;
use timebin_core::channel::split_seed;
use timebin_core::{
    expected_observables, secret_key_length, simulate_block, ChannelError, KeyLengthReport,
    LinkModel, ProtocolConfig, SyncMode,
};
use timebin_session::{run_session, AbortReason, SessionError, SessionPolicy};

use crate::rows::{RateVsLossRow, RateVsPowerRow, RATE_VS_LOSS_SCHEMA, RATE_VS_POWER_SCHEMA};
use crate::HarnessError;

/// How each sweep point is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Closed-form expected observables into the finite-key bound.
    Analytic,
    /// Seeded Monte-Carlo blocks.
    Mc,
    /// Complete two-party sessions over the in-memory transport.
    Session,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Analytic => "analytic",
            Mode::Mc => "mc",
            Mode::Session => "session",
        }
    }
}

/// A validated sweep instruction: grid, repetition count, mode, seed.
#[derive(Clone, Copy, Debug)]
pub struct SweepSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub blocks_per_point: u32,
    pub mode: Mode,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !self.start.is_finite() || !self.stop.is_finite() || !self.step.is_finite() {
            return Err(HarnessError::Config("sweep bounds must be finite".into()));
        }
        if self.step <= 0.0 {
            return Err(HarnessError::Config(format!(
                "sweep step must be positive, got {}",
                self.step
            )));
        }
        if self.start > self.stop {
            return Err(HarnessError::Config(format!(
                "sweep start {} exceeds stop {}",
                self.start, self.stop
            )));
        }
        if self.blocks_per_point < 1 {
            return Err(HarnessError::Config(
                "blocks-per-point must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The grid `start, start+step, …`, inclusive of `stop` up to one part
    /// in 10⁹ of a step.
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }
}

/// Means of every finite-key report field a sweep row carries.
#[derive(Clone, Copy, Debug, Default)]
struct ReportMean {
    count: f64,
    qber_z: f64,
    qber_x: f64,
    n_z: f64,
    m_z: f64,
    n_x: f64,
    m_x: f64,
    tau0: f64,
    tau1: f64,
    s_z0_low: f64,
    s_z0_up: f64,
    s_z1_low: f64,
    s_x1_low: f64,
    v_x1_up: f64,
    phi_z_up: f64,
    lambda_ec: f64,
    elapsed_s: f64,
}

impl ReportMean {
    fn add(&mut self, r: &KeyLengthReport) {
        self.count += 1.0;
        self.qber_z += r.qber_z;
        self.qber_x += r.qber_x;
        self.n_z += r.n_z_total;
        self.m_z += r.m_z_total;
        self.n_x += r.n_x_total;
        self.m_x += r.m_x_total;
        self.tau0 += r.tau0;
        self.tau1 += r.tau1;
        self.s_z0_low += r.s_z0_low;
        self.s_z0_up += r.s_z0_up;
        self.s_z1_low += r.s_z1_low;
        self.s_x1_low += r.s_x1_low;
        self.v_x1_up += r.v_x1_up;
        self.phi_z_up += r.phi_z_up;
        self.lambda_ec += r.lambda_ec;
        self.elapsed_s += r.elapsed_time;
    }

    fn finish(mut self) -> Self {
        if self.count > 0.0 {
            let inv = 1.0 / self.count;
            for field in [
                &mut self.qber_z,
                &mut self.qber_x,
                &mut self.n_z,
                &mut self.m_z,
                &mut self.n_x,
                &mut self.m_x,
                &mut self.tau0,
                &mut self.tau1,
                &mut self.s_z0_low,
                &mut self.s_z0_up,
                &mut self.s_z1_low,
                &mut self.s_x1_low,
                &mut self.v_x1_up,
                &mut self.phi_z_up,
                &mut self.lambda_ec,
                &mut self.elapsed_s,
            ] {
                *field *= inv;
            }
        }
        self
    }
}

/// One evaluated sweep point, before row formatting.
struct PointOutcome {
    blocks: u32,
    skr: f64,
    skr_std: f64,
    key_length: f64,
    mean: ReportMean,
    zero_reason: String,
}

fn sample_std(samples: &[f64], mean: f64) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let n = samples.len() as f64;
    (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn evaluate_point(
    mode: Mode,
    config: &ProtocolConfig,
    link: &LinkModel,
    blocks: u32,
    point_seed: u64,
) -> Result<PointOutcome, HarnessError> {
    let mut skr_samples = Vec::new();
    let mut key_samples = Vec::new();
    let mut reasons: Vec<String> = Vec::new();
    let mut mean = ReportMean::default();

    match mode {
        Mode::Analytic => {
            let report = secret_key_length(&expected_observables(config, link), config)?;
            skr_samples.push(report.skr);
            key_samples.push(report.key_length as f64);
            reasons.push(report.zero_reason.map(|r| r.to_string()).unwrap_or_default());
            mean.add(&report);
        }
        Mode::Mc => {
            for b in 0..blocks {
                let seed = split_seed(point_seed, b as u64);
                match simulate_block(config, link, None, seed) {
                    Ok((counts, _)) => {
                        let report = secret_key_length(&counts, config)?;
                        skr_samples.push(report.skr);
                        key_samples.push(report.key_length as f64);
                        reasons
                            .push(report.zero_reason.map(|r| r.to_string()).unwrap_or_default());
                        mean.add(&report);
                    }
                    // The reachability check precedes any sampling, so one
                    // failure covers every block at this point.
                    Err(ChannelError::BlockUnreachable { .. }) => {
                        return Ok(PointOutcome {
                            blocks,
                            skr: 0.0,
                            skr_std: 0.0,
                            key_length: 0.0,
                            mean: ReportMean::default(),
                            zero_reason: "block-unreachable".into(),
                        });
                    }
                }
            }
        }
        Mode::Session => {
            let policy = SessionPolicy::default();
            for b in 0..blocks {
                let seed = split_seed(point_seed, b as u64);
                match run_session(config, link, &policy, seed) {
                    Ok(out) => {
                        let final_bits = out.alice_key.len() as f64;
                        let elapsed = out.report.elapsed_time;
                        skr_samples.push(if elapsed > 0.0 { final_bits / elapsed } else { 0.0 });
                        key_samples.push(final_bits);
                        reasons.push(String::new());
                        mean.add(&out.report);
                    }
                    Err(SessionError::Aborted { reason, detail, .. }) => {
                        skr_samples.push(0.0);
                        key_samples.push(0.0);
                        reasons.push(match reason {
                            AbortReason::NoKey => detail,
                            AbortReason::Channel => "channel".into(),
                            AbortReason::Correctness => "correctness".into(),
                        });
                    }
                    Err(other) => return Err(other.into()),
                }
            }
        }
    }

    let skr = skr_samples.iter().sum::<f64>() / skr_samples.len() as f64;
    let key_length = key_samples.iter().sum::<f64>() / key_samples.len() as f64;
    let zero_reason = if key_samples.iter().all(|&k| k == 0.0) {
        reasons.iter().find(|r| !r.is_empty()).cloned().unwrap_or_default()
    } else {
        String::new()
    };
    Ok(PointOutcome {
        blocks: skr_samples.len() as u32,
        skr,
        skr_std: sample_std(&skr_samples, skr),
        key_length,
        mean: mean.finish(),
        zero_reason,
    })
}

/// Secret key rate as a function of channel attenuation: one row per grid
/// point. Zero-key points carry the reason instead of failing.
pub fn run_rate_vs_loss(
    spec: &SweepSpec,
    config: &ProtocolConfig,
    link: &LinkModel,
) -> Result<Vec<RateVsLossRow>, HarnessError> {
    spec.validate()?;
    spec.points()
        .par_iter()
        .enumerate()
        .map(|(i, &loss)| {
            let mut point_link = link.clone();
            point_link.channel_loss = loss;
            let point = evaluate_point(
                spec.mode,
                config,
                &point_link,
                spec.blocks_per_point,
                split_seed(spec.seed, i as u64),
            )?;
            Ok(RateVsLossRow {
                schema: RATE_VS_LOSS_SCHEMA,
                mode: spec.mode.as_str(),
                loss_db: loss,
                blocks: point.blocks,
                skr: point.skr,
                skr_std: point.skr_std,
                key_length: point.key_length,
                qber_z: point.mean.qber_z,
                qber_x: point.mean.qber_x,
                n_z: point.mean.n_z,
                m_z: point.mean.m_z,
                n_x: point.mean.n_x,
                m_x: point.mean.m_x,
                tau0: point.mean.tau0,
                tau1: point.mean.tau1,
                s_z0_low: point.mean.s_z0_low,
                s_z0_up: point.mean.s_z0_up,
                s_z1_low: point.mean.s_z1_low,
                s_x1_low: point.mean.s_x1_low,
                v_x1_up: point.mean.v_x1_up,
                phi_z_up: point.mean.phi_z_up,
                lambda_ec: point.mean.lambda_ec,
                elapsed_s: point.mean.elapsed_s,
                zero_reason: point.zero_reason,
            })
        })
        .collect()
}

/// Secret key rate as a function of CW classical launch power at fixed
/// channel loss. The link's synchronization mode is taken as given, so the
/// same sweep serves dark-fiber and optical-sync configurations.
pub fn run_rate_vs_power(
    spec: &SweepSpec,
    config: &ProtocolConfig,
    link: &LinkModel,
) -> Result<Vec<RateVsPowerRow>, HarnessError> {
    spec.validate()?;
    let sync = match link.sync {
        SyncMode::Electrical => "electrical",
        SyncMode::Optical { .. } => "optical",
    };
    spec.points()
        .par_iter()
        .enumerate()
        .map(|(i, &power)| {
            let mut point_link = link.clone();
            point_link.classical_power = Some(power);
            let point = evaluate_point(
                spec.mode,
                config,
                &point_link,
                spec.blocks_per_point,
                split_seed(spec.seed, i as u64),
            )?;
            Ok(RateVsPowerRow {
                schema: RATE_VS_POWER_SCHEMA,
                mode: spec.mode.as_str(),
                sync,
                classical_power_dbm: power,
                blocks: point.blocks,
                skr: point.skr,
                skr_std: point.skr_std,
                key_length: point.key_length,
                qber_z: point.mean.qber_z,
                qber_x: point.mean.qber_x,
                visibility_equiv: 1.0 - 2.0 * point.mean.qber_x,
                n_z: point.mean.n_z,
                m_z: point.mean.m_z,
                n_x: point.mean.n_x,
                m_x: point.mean.m_x,
                tau0: point.mean.tau0,
                tau1: point.mean.tau1,
                s_z0_low: point.mean.s_z0_low,
                s_z0_up: point.mean.s_z0_up,
                s_z1_low: point.mean.s_z1_low,
                s_x1_low: point.mean.s_x1_low,
                v_x1_up: point.mean.v_x1_up,
                phi_z_up: point.mean.phi_z_up,
                lambda_ec: point.mean.lambda_ec,
                elapsed_s: point.mean.elapsed_s,
                zero_reason: point.zero_reason,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rows::csv_bytes;
    use timebin_core::paper_defaults;

    fn spec(start: f64, stop: f64, step: f64, blocks: u32, mode: Mode) -> SweepSpec {
        SweepSpec {
            start,
            stop,
            step,
            blocks_per_point: blocks,
            mode,
            seed: 1,
        }
    }

    fn symmetric_pair(loss_db: f64) -> (ProtocolConfig, LinkModel) {
        let (mut config, mut link) = paper_defaults();
        config.p_z_alice = 0.5;
        config.p_x_alice = 0.5;
        link.bob_p_z = 0.5;
        link.bob_p_x = 0.5;
        link.channel_loss = loss_db;
        (config, link)
    }

    #[test]
    fn grid_points_are_inclusive() {
        assert_eq!(spec(0.0, 40.0, 1.0, 1, Mode::Analytic).points().len(), 41);
        assert_eq!(spec(0.0, 5.0, 2.0, 1, Mode::Analytic).points(), vec![0.0, 2.0, 4.0]);
        let power = spec(-45.0, -24.0, 0.5, 1, Mode::Analytic).points();
        assert_eq!(power.len(), 43);
        assert_eq!(*power.last().unwrap(), -24.0);
        assert_eq!(spec(7.0, 7.0, 1.0, 1, Mode::Analytic).points(), vec![7.0]);
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        assert!(spec(0.0, 10.0, 0.0, 1, Mode::Analytic).validate().is_err());
        assert!(spec(0.0, 10.0, -1.0, 1, Mode::Analytic).validate().is_err());
        assert!(spec(10.0, 0.0, 1.0, 1, Mode::Analytic).validate().is_err());
        assert!(spec(0.0, 10.0, 1.0, 0, Mode::Analytic).validate().is_err());
        assert!(spec(0.0, f64::NAN, 1.0, 1, Mode::Analytic).validate().is_err());
        assert!(spec(0.0, 10.0, 1.0, 1, Mode::Analytic).validate().is_ok());
    }

    #[test]
    fn analytic_loss_sweep_is_monotone_and_hits_the_reference() {
        let (config, link) = paper_defaults();
        let rows = run_rate_vs_loss(&spec(0.0, 40.0, 1.0, 1, Mode::Analytic), &config, &link)
            .unwrap();
        assert_eq!(rows.len(), 41);
        for pair in rows.windows(2) {
            assert!(pair[1].skr <= pair[0].skr, "not monotone at {} dB", pair[1].loss_db);
        }
        let at_21 = &rows[21];
        assert!((at_21.skr - 4530.0).abs() < 0.01, "skr(21) = {}", at_21.skr);
        assert!(rows[28].skr > 0.0);
        assert_eq!(rows[29].skr, 0.0);
        assert!(!rows[29].zero_reason.is_empty());
        assert!(rows[29].elapsed_s > 0.0);
    }

    #[test]
    fn mc_sweep_agrees_with_analytic_at_a_point() {
        let (mut config, link) = symmetric_pair(10.0);
        config.block_size = 100_000;
        let analytic =
            run_rate_vs_loss(&spec(10.0, 10.0, 1.0, 1, Mode::Analytic), &config, &link).unwrap();
        let mc = run_rate_vs_loss(&spec(10.0, 10.0, 1.0, 20, Mode::Mc), &config, &link).unwrap();
        assert_eq!(mc[0].blocks, 20);
        assert!(mc[0].skr_std > 0.0);
        let sigma_mean = mc[0].skr_std / (20f64).sqrt();
        let diff = (mc[0].skr - analytic[0].skr).abs();
        assert!(
            diff <= 5.0 * sigma_mean + 1.0,
            "mc {} vs analytic {} (σ_mean {})",
            mc[0].skr,
            analytic[0].skr,
            sigma_mean
        );
    }

    #[test]
    fn session_sweep_reports_final_bits() {
        let (mut config, link) = symmetric_pair(10.0);
        config.block_size = 150_000;
        let rows =
            run_rate_vs_loss(&spec(10.0, 10.0, 1.0, 1, Mode::Session), &config, &link).unwrap();
        let row = &rows[0];
        assert_eq!(row.mode, "session");
        assert!(row.skr > 0.0);
        assert!(row.key_length > 0.0);
        assert!(row.zero_reason.is_empty());
        assert!(row.n_z >= 150_000.0);
        assert!(row.qber_z > 0.0 && row.qber_z < 0.05);
    }

    #[test]
    fn session_sweep_marks_aborted_points() {
        let (mut config, link) = paper_defaults();
        config.block_size = 2_000;
        let rows =
            run_rate_vs_loss(&spec(38.0, 38.0, 1.0, 2, Mode::Session), &config, &link).unwrap();
        assert_eq!(rows[0].skr, 0.0);
        assert_eq!(rows[0].key_length, 0.0);
        assert!(!rows[0].zero_reason.is_empty(), "reason missing");
    }

    #[test]
    fn power_sweep_crosses_at_the_calibrated_cutoff() {
        let (config, link) = paper_defaults();
        let rows = run_rate_vs_power(
            &spec(-45.0, -24.0, 0.5, 1, Mode::Analytic),
            &config,
            &link,
        )
        .unwrap();
        for pair in rows.windows(2) {
            assert!(pair[1].skr <= pair[0].skr + 1e-9);
        }
        let at = |p: f64| {
            rows.iter()
                .find(|r| (r.classical_power_dbm - p).abs() < 1e-9)
                .unwrap()
        };
        assert!((at(-27.5).skr - 463.75).abs() < 0.5, "{}", at(-27.5).skr);
        assert_eq!(at(-26.5).skr, 0.0);
        assert!(!at(-26.5).zero_reason.is_empty());
        assert!((at(-29.0).skr - 1601.40).abs() < 0.5, "{}", at(-29.0).skr);
        let row = at(-29.0);
        assert!((row.visibility_equiv - (1.0 - 2.0 * row.qber_x)).abs() < 1e-12);
        assert_eq!(row.sync, "electrical");
    }

    #[test]
    fn zero_crosstalk_makes_the_power_sweep_flat() {
        let (config, mut link) = paper_defaults();
        link.crosstalk_coeff = 0.0;
        let rows = run_rate_vs_power(
            &spec(-45.0, -25.0, 5.0, 1, Mode::Analytic),
            &config,
            &link,
        )
        .unwrap();
        for row in &rows {
            assert_eq!(row.skr, rows[0].skr);
        }
        assert!(rows[0].skr > 0.0);
    }

    #[test]
    fn optical_sync_lowers_every_power_point() {
        let (config, mut link) = paper_defaults();
        let dark = run_rate_vs_power(
            &spec(-40.0, -28.0, 2.0, 1, Mode::Analytic),
            &config,
            &link,
        )
        .unwrap();
        link.sync = SyncMode::optical(-29.0);
        let optical = run_rate_vs_power(
            &spec(-40.0, -28.0, 2.0, 1, Mode::Analytic),
            &config,
            &link,
        )
        .unwrap();
        for (d, o) in dark.iter().zip(&optical) {
            assert!(o.skr < d.skr, "at {} dBm", d.classical_power_dbm);
            assert_eq!(o.sync, "optical");
        }
    }

    #[test]
    fn mc_sweep_output_is_byte_deterministic() {
        let (mut config, link) = symmetric_pair(12.0);
        config.block_size = 50_000;
        let s = spec(8.0, 12.0, 2.0, 3, Mode::Mc);
        let a = run_rate_vs_loss(&s, &config, &link).unwrap();
        let b = run_rate_vs_loss(&s, &config, &link).unwrap();
        assert_eq!(csv_bytes(&a).unwrap(), csv_bytes(&b).unwrap());
    }
}
