//! `timebin`: command-line harness for the time-bin QKD simulator.
//!
//! Subcommands map one-to-one onto the library runners: `rate-vs-loss`,
//! `rate-vs-power`, and `stability` emit CSV (stdout or `--out`),
//! `session` runs one full two-party exchange and writes its artifacts
//! into `--out`, and `calibrate` re-derives the frozen device constants.
//! Exit codes: 0 success, 2 configuration or usage error, 3 protocol
//! abort.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use timebin_core::channel::LossStep;
use timebin_core::{paper_defaults, ConfigFile, DriftProfile, LinkModel, ProtocolConfig, SyncMode};
use timebin_harness::calibrate::run_calibration;
use timebin_harness::rows::write_csv;
use timebin_harness::sessions::{run_full_session, run_peer, TransportChoice};
use timebin_harness::stability::{run_stability, StabilitySpec};
use timebin_harness::sweep::{run_rate_vs_loss, run_rate_vs_power, Mode, SweepSpec};
use timebin_harness::HarnessError;
use timebin_session::SessionPolicy;

#[derive(Parser)]
#[command(
    name = "timebin",
    version,
    about = "Time-bin QKD simulation harness: rate sweeps, stability runs, full sessions, calibration"
)]
struct Cli {
    /// TOML parameter file; omitted = the calibrated reference setup.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; points and blocks derive theirs by counter splitting.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output file (CSV/text) or directory (session artifacts); stdout if omitted.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// How sweep points are evaluated.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Analytic)]
    mode: Mode,
    /// Override the analysis block size (sifted Z detections per block).
    #[arg(long, global = true, value_name = "N")]
    block: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum SyncChoice {
    /// Shared electrical clock; nothing extra in the fiber.
    Electrical,
    /// In-fiber optical clock pattern (see --sync-power).
    Optical,
}

#[derive(Subcommand)]
enum Cmd {
    /// Secret key rate versus channel loss.
    RateVsLoss {
        /// First loss point, dB.
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        /// Last loss point, dB (inclusive).
        #[arg(long, default_value_t = 40.0)]
        stop: f64,
        /// Grid step, dB.
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// Blocks (or sessions) evaluated per point.
        #[arg(long, default_value_t = 1)]
        blocks: u32,
    },
    /// Secret key rate versus co-propagating classical launch power.
    RateVsPower {
        /// First power point, dBm.
        #[arg(long, default_value_t = -45.0, allow_negative_numbers = true)]
        start: f64,
        /// Last power point, dBm (inclusive).
        #[arg(long, default_value_t = -24.0, allow_negative_numbers = true)]
        stop: f64,
        /// Grid step, dB.
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        /// Blocks (or sessions) evaluated per point.
        #[arg(long, default_value_t = 1)]
        blocks: u32,
        /// Override the configured clock-recovery mode.
        #[arg(long, value_enum)]
        sync: Option<SyncChoice>,
        /// Launch power of the optical sync pattern (with --sync optical), dBm.
        #[arg(long, default_value_t = -29.0, allow_negative_numbers = true)]
        sync_power: f64,
    },
    /// Per-interval rate and error time series under a drifting link.
    Stability {
        /// Run length, seconds.
        #[arg(long, default_value_t = 14400.0)]
        duration: f64,
        /// Averaging interval, seconds.
        #[arg(long, default_value_t = 600.0)]
        interval: f64,
        /// Channel-loss sinusoid amplitude, dB.
        #[arg(long, default_value_t = 0.0)]
        loss_amp_db: f64,
        /// Channel-loss sinusoid period, seconds.
        #[arg(long, default_value_t = 3600.0)]
        loss_period_s: f64,
        /// Visibility sinusoid amplitude.
        #[arg(long, default_value_t = 0.0)]
        vis_amp: f64,
        /// Visibility sinusoid period, seconds.
        #[arg(long, default_value_t = 3600.0)]
        vis_period_s: f64,
        /// Loss step "AT_S:DELTA_DB", repeatable.
        #[arg(long = "loss-step", value_name = "AT_S:DELTA_DB", value_parser = parse_loss_step)]
        loss_steps: Vec<LossStep>,
        /// Override the configured clock-recovery mode.
        #[arg(long, value_enum)]
        sync: Option<SyncChoice>,
        /// Launch power of the optical sync pattern (with --sync optical), dBm.
        #[arg(long, default_value_t = -29.0, allow_negative_numbers = true)]
        sync_power: f64,
    },
    /// One full two-party session: key files, transcript, summary row.
    Session {
        #[arg(long, value_enum, default_value_t = TransportChoice::Memory)]
        transport: TransportChoice,
        /// Channel loss override, dB.
        #[arg(long)]
        loss: Option<f64>,
        /// Sifted Z bits disclosed for QBER estimation, permille.
        #[arg(long, default_value_t = 20)]
        sample_permille: u16,
        /// Emitted-slot budget before the block is declared unreachable.
        #[arg(long)]
        slot_budget: Option<u64>,
    },
    /// Re-derive the calibrated device constants and their operating points.
    Calibrate,
    /// Bob's endpoint of the two-process session mode (spawned internally).
    #[command(hide = true)]
    SessionPeer {
        /// Address of the waiting session parent.
        #[arg(long)]
        connect: String,
        #[arg(long, default_value_t = 20)]
        sample_permille: u16,
        #[arg(long)]
        slot_budget: Option<u64>,
    },
}

fn parse_loss_step(s: &str) -> Result<LossStep, String> {
    let (at, delta) = s
        .split_once(':')
        .ok_or_else(|| "expected AT_S:DELTA_DB".to_string())?;
    Ok(LossStep {
        at_s: at
            .trim()
            .parse()
            .map_err(|e| format!("bad AT_S value: {e}"))?,
        delta_db: delta
            .trim()
            .parse()
            .map_err(|e| format!("bad DELTA_DB value: {e}"))?,
    })
}

fn load_config(path: Option<&Path>) -> Result<(ProtocolConfig, LinkModel), HarnessError> {
    match path {
        Some(p) => Ok(ConfigFile::load(p)?.validated()?),
        None => Ok(paper_defaults()),
    }
}

fn apply_sync(link: &mut LinkModel, choice: Option<SyncChoice>, launch_dbm: f64) {
    match choice {
        None => {}
        Some(SyncChoice::Electrical) => link.sync = SyncMode::Electrical,
        Some(SyncChoice::Optical) => link.sync = SyncMode::optical(launch_dbm),
    }
}

fn session_policy(sample_permille: u16, slot_budget: Option<u64>) -> Result<SessionPolicy, HarnessError> {
    if sample_permille > 999 {
        return Err(HarnessError::Config(format!(
            "sample-permille must be below 1000, got {sample_permille}"
        )));
    }
    let mut policy = SessionPolicy::default();
    policy.sample_permille = sample_permille;
    if let Some(budget) = slot_budget {
        policy.slot_budget = budget;
    }
    Ok(policy)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (mut config, mut link) = load_config(cli.config.as_deref())?;
    if let Some(block) = cli.block {
        if block == 0 {
            return Err(HarnessError::Config("block size must be positive".into()));
        }
        config.block_size = block;
    }

    match cli.command {
        Cmd::RateVsLoss {
            start,
            stop,
            step,
            blocks,
        } => {
            let spec = SweepSpec {
                start,
                stop,
                step,
                blocks_per_point: blocks,
                mode: cli.mode,
                seed: cli.seed,
            };
            write_csv(&run_rate_vs_loss(&spec, &config, &link)?, cli.out.as_deref())
        }
        Cmd::RateVsPower {
            start,
            stop,
            step,
            blocks,
            sync,
            sync_power,
        } => {
            apply_sync(&mut link, sync, sync_power);
            let spec = SweepSpec {
                start,
                stop,
                step,
                blocks_per_point: blocks,
                mode: cli.mode,
                seed: cli.seed,
            };
            write_csv(&run_rate_vs_power(&spec, &config, &link)?, cli.out.as_deref())
        }
        Cmd::Stability {
            duration,
            interval,
            loss_amp_db,
            loss_period_s,
            vis_amp,
            vis_period_s,
            loss_steps,
            sync,
            sync_power,
        } => {
            apply_sync(&mut link, sync, sync_power);
            let drift = DriftProfile {
                loss_amp_db,
                loss_period_s,
                loss_phase_rad: 0.0,
                vis_amp,
                vis_period_s,
                vis_phase_rad: 0.0,
                loss_steps,
            };
            let spec = StabilitySpec {
                duration_s: duration,
                interval_s: interval,
                mode: cli.mode,
                seed: cli.seed,
            };
            write_csv(
                &run_stability(&spec, &config, &link, &drift)?,
                cli.out.as_deref(),
            )
        }
        Cmd::Session {
            transport,
            loss,
            sample_permille,
            slot_budget,
        } => {
            if let Some(db) = loss {
                link.channel_loss = db;
            }
            let out_dir = cli.out.ok_or_else(|| {
                HarnessError::Config(
                    "session requires --out DIR for the key and transcript artifacts".into(),
                )
            })?;
            let policy = session_policy(sample_permille, slot_budget)?;
            run_full_session(&config, &link, &policy, transport, cli.seed, &out_dir)?;
            Ok(())
        }
        Cmd::Calibrate => {
            let report = run_calibration().to_report();
            match cli.out {
                Some(path) => std::fs::write(path, report)?,
                None => print!("{report}"),
            }
            Ok(())
        }
        Cmd::SessionPeer {
            connect,
            sample_permille,
            slot_budget,
        } => {
            let out_dir = cli.out.ok_or_else(|| {
                HarnessError::Config("session-peer requires --out DIR".into())
            })?;
            let policy = session_policy(sample_permille, slot_budget)?;
            run_peer(&connect, &config, &link, &policy, &out_dir)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
