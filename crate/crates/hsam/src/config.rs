//! TOML run configuration. Every key mirrors a [`RunConfig`] field; unknown
//! keys are errors and missing keys take their defaults.

use std::path::Path;

use hsam_core::config::RunConfig;
use hsam_core::model::ModelConfig;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub fn parse(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Canonical text form; parsing it gives back an equal configuration.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run configuration is representable in TOML")
}

/// SHA-256 of the canonical form of the whole configuration.
pub fn config_hash(cfg: &RunConfig) -> [u8; 32] {
    Sha256::digest(to_toml(cfg).as_bytes()).into()
}

/// SHA-256 of the architecture section alone.
pub fn model_hash(model: &ModelConfig) -> [u8; 32] {
    let text = toml::to_string(model).expect("model configuration is representable in TOML");
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
