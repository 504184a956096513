//! One complete two-party session with artifact output.
//!
//! Runs Alice and Bob either in-process over the in-memory duplex or with
//! Bob in a spawned child process connected over localhost TCP (the child
//! re-reads the exact parameter set from a config file written next to the
//! artifacts). Either way the run leaves four artifacts in the output
//! directory: `alice.key`, `bob.key`, `transcript.bin`, and `session.csv`,
//! and the two key files are compared byte for byte.

use std::io::Read;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use timebin_core::{ConfigFile, LinkModel, ProtocolConfig};
use timebin_session::{
    audit_transcript, drive_alice, drive_bob, read_key_file, run_session, write_key_file,
    BitString, PartyOutcome, SessionPolicy, TcpTransport,
};

use crate::rows::{write_csv, SessionRow, SESSION_SCHEMA};
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TransportChoice {
    /// Both parties in this process over an in-memory pipe.
    Memory,
    /// Bob in a child process, connected over localhost TCP.
    Tcp,
}

impl TransportChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportChoice::Memory => "memory",
            TransportChoice::Tcp => "tcp",
        }
    }
}

/// Runs one session, writes the artifacts, and returns the summary row.
/// Key files that fail the byte-for-byte comparison leave the artifacts in
/// place and surface as [`HarnessError::KeyMismatch`].
pub fn run_full_session(
    config: &ProtocolConfig,
    link: &LinkModel,
    policy: &SessionPolicy,
    choice: TransportChoice,
    seed: u64,
    out_dir: &Path,
) -> Result<SessionRow, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let (alice, bob_key) = match choice {
        TransportChoice::Memory => {
            let out = run_session(config, link, policy, seed)?;
            write_key_file(&out_dir.join("bob.key"), &out.bob_key)?;
            let alice = PartyOutcome {
                key: out.alice_key,
                report: out.report,
                transcript: out.transcript,
            };
            (alice, out.bob_key)
        }
        TransportChoice::Tcp => run_tcp_parent(config, link, policy, seed, out_dir)?,
    };

    let audit = audit_transcript(&alice.transcript, &alice.report, config)?;
    write_key_file(&out_dir.join("alice.key"), &alice.key)?;
    let transcript_bytes = alice.transcript.to_bytes();
    std::fs::write(out_dir.join("transcript.bin"), &transcript_bytes)?;

    let keys_match = alice.key == bob_key;
    let final_key_bits = alice.key.len() as u64;
    let elapsed = alice.report.elapsed_time;
    let row = SessionRow {
        schema: SESSION_SCHEMA,
        transport: choice.as_str(),
        seed,
        loss_db: link.channel_loss,
        block_size: policy.block_size.unwrap_or(config.block_size),
        sifted_z: audit.sifted_z,
        qber_z: alice.report.qber_z,
        report_key_length: alice.report.key_length,
        final_key_bits,
        skr: if elapsed > 0.0 {
            final_key_bits as f64 / elapsed
        } else {
            0.0
        },
        elapsed_s: elapsed,
        sample_bits: audit.sample_bits,
        grant_bits: audit.grant_bits,
        tag_bits: audit.tag_bits,
        lambda_ec: audit.modeled_ec_bits,
        transcript_bytes: transcript_bytes.len() as u64,
        audit_ok: audit.ok(),
        keys_match,
    };
    write_csv(&[row.clone()], Some(&out_dir.join("session.csv")))?;
    if !keys_match {
        return Err(HarnessError::KeyMismatch);
    }
    Ok(row)
}

/// Alice's side of the two-process mode: write the config for the child,
/// spawn it against an ephemeral localhost port, run the session, then
/// collect the child and its key file.
fn run_tcp_parent(
    config: &ProtocolConfig,
    link: &LinkModel,
    policy: &SessionPolicy,
    seed: u64,
    out_dir: &Path,
) -> Result<(PartyOutcome, BitString), HarnessError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let config_path = out_dir.join("session-config.toml");
    ConfigFile::new(config.clone(), link.clone()).save(&config_path)?;

    let mut cmd = Command::new(std::env::current_exe()?);
    cmd.arg("session-peer")
        .arg("--connect")
        .arg(addr.to_string())
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(out_dir)
        .arg("--sample-permille")
        .arg(policy.sample_permille.to_string())
        .arg("--slot-budget")
        .arg(policy.slot_budget.to_string());
    if let Some(block) = policy.block_size {
        cmd.arg("--block").arg(block.to_string());
    }
    cmd.stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn()?;

    let stream = match accept_with_deadline(&listener, &mut child) {
        Ok(stream) => stream,
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(e);
        }
    };
    let mut transport = TcpTransport::new(stream);
    let alice = drive_alice(&mut transport, config, policy, seed);
    // Hang up before reaping so the child can never block on a dead session.
    drop(transport);
    let output = child.wait_with_output()?;

    let alice = alice?;
    if !output.status.success() {
        return Err(HarnessError::Peer {
            status: output.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    let bob_key = read_key_file(&out_dir.join("bob.key"))?;
    Ok((alice, bob_key))
}

fn accept_with_deadline(
    listener: &TcpListener,
    child: &mut Child,
) -> Result<TcpStream, HarnessError> {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if let Some(status) = child.try_wait()? {
                    let mut stderr = String::new();
                    if let Some(mut pipe) = child.stderr.take() {
                        let _ = pipe.read_to_string(&mut stderr);
                    }
                    return Err(HarnessError::Peer {
                        status: status.code().unwrap_or(-1),
                        stderr,
                    });
                }
                if Instant::now() >= deadline {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::TimedOut,
                        "peer did not connect within 30 s",
                    )
                    .into());
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Bob's endpoint of the two-process mode: connect out, run the session,
/// write `bob.key` into the output directory.
pub fn run_peer(
    connect: &str,
    config: &ProtocolConfig,
    link: &LinkModel,
    policy: &SessionPolicy,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let stream = TcpStream::connect(connect)?;
    let mut transport = TcpTransport::new(stream);
    let bob = drive_bob(&mut transport, config, link, policy)?;
    write_key_file(&out_dir.join("bob.key"), &bob.key)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use timebin_core::paper_defaults;
    use timebin_session::{SessionError, SessionTranscript};

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
    fn memory_session_writes_matching_artifacts() {
        let (config, link) = symmetric_pair(10.0);
        let policy = SessionPolicy {
            block_size: Some(150_000),
            ..SessionPolicy::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let row = run_full_session(
            &config,
            &link,
            &policy,
            TransportChoice::Memory,
            11,
            dir.path(),
        )
        .unwrap();

        assert!(row.keys_match);
        assert!(row.audit_ok);
        assert!(row.final_key_bits > 0);
        assert_eq!(row.block_size, 150_000);
        assert_eq!(row.transport, "memory");

        let alice = read_key_file(&dir.path().join("alice.key")).unwrap();
        let bob = read_key_file(&dir.path().join("bob.key")).unwrap();
        assert_eq!(alice, bob);
        assert_eq!(alice.len() as u64, row.final_key_bits);

        let transcript_bytes = std::fs::read(dir.path().join("transcript.bin")).unwrap();
        assert_eq!(transcript_bytes.len() as u64, row.transcript_bytes);
        SessionTranscript::from_bytes(&transcript_bytes).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("session.csv")).unwrap();
        assert!(csv.starts_with("schema,transport,seed"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn aborted_session_leaves_no_key_files() {
        let (config, mut link) = paper_defaults();
        link.channel_loss = 38.0;
        let policy = SessionPolicy {
            block_size: Some(2_000),
            ..SessionPolicy::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_full_session(
            &config,
            &link,
            &policy,
            TransportChoice::Memory,
            5,
            dir.path(),
        )
        .unwrap_err();
        match &err {
            HarnessError::Session(SessionError::Aborted { .. }) => {}
            other => panic!("expected abort, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
        assert!(!dir.path().join("alice.key").exists());
        assert!(!dir.path().join("bob.key").exists());
    }
}
