//! Binary final-key files.
//!
//! Layout: a 16-byte header — 4-byte magic `TBQK`, `u32` format version,
//! `u64` key length in bits, all little-endian — followed by the key packed
//! LSB-first with zero padding in the last byte.

use crate::bits::BitString;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const KEY_FILE_MAGIC: [u8; 4] = *b"TBQK";
pub const KEY_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a key file (bad magic)")]
    BadMagic,
    #[error("unsupported key file version {0}")]
    BadVersion(u32),
    #[error("malformed key payload: {0}")]
    Malformed(String),
}

pub fn write_key_file(path: &Path, key: &BitString) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(16 + key.len().div_ceil(8));
    bytes.extend_from_slice(&KEY_FILE_MAGIC);
    bytes.extend_from_slice(&KEY_FILE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(key.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&key.to_bytes());
    fs::write(path, bytes)
}

pub fn read_key_file(path: &Path) -> Result<BitString, KeyFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(KeyFileError::Malformed("shorter than the header".into()));
    }
    if bytes[..4] != KEY_FILE_MAGIC {
        return Err(KeyFileError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != KEY_FILE_VERSION {
        return Err(KeyFileError::BadVersion(version));
    }
    let bit_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let bit_len = usize::try_from(bit_len)
        .map_err(|_| KeyFileError::Malformed("length overflows".into()))?;
    BitString::from_bytes(&bytes[16..], bit_len).ok_or_else(|| {
        KeyFileError::Malformed("payload size or padding inconsistent with length".into())
    })
}
