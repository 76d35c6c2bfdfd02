//! Versioned JSON envelopes for networks, agents and run configs.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

pub fn to_string<T: Serialize>(format: &str, value: &T) -> Result<String> {
    let env = Envelope {
        format: format.to_string(),
        version: VERSION,
        payload: value,
    };
    Ok(serde_json::to_string(&env)?)
}

pub fn from_str<T: DeserializeOwned>(text: &str, format: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != format {
        return Err(Error::Checkpoint(format!(
            "expected a `{format}` checkpoint, found `{}`",
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
    }
    Ok(env.payload)
}

pub fn save<T: Serialize>(path: &Path, format: &str, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_string(format, value)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    from_str(&fs::read_to_string(path)?, format)
}

/// Hex SHA-256, used to fingerprint checkpoints and configs.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
