//! Scenario files. A scenario is stored as TOML with one table per module
//! (`[dmac]`, `[memory]`, `[workload]`, `[window]`); every key is optional
//! and falls back to the defaults of the named preset.

use std::path::{Path, PathBuf};

use dmac_core::run::Scenario;
use thiserror::Error;

/// Everything one run needs, as read from disk.
pub type ScenarioConfig = Scenario;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown configuration `{0}` (expected base, speculation, scaled or baseline)")]
    UnknownPreset(String),
}

pub fn validate(sc: &ScenarioConfig) -> Result<(), ConfigError> {
    let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
    sc.dmac.validate().map_err(|e| invalid(&e))?;
    sc.memory.validate().map_err(|e| invalid(&e))?;
    sc.workload.validate().map_err(|e| invalid(&e))?;
    Ok(())
}

pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let sc: ScenarioConfig = toml::from_str(text)?;
    validate(&sc)?;
    Ok(sc)
}

pub fn to_toml(sc: &ScenarioConfig) -> Result<String, ConfigError> {
    Ok(toml::to_string(sc)?)
}

pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_toml(&text)
}

/// A named hardware configuration with the default workload.
pub fn preset(name: &str, latency: u64, size: u32) -> Result<ScenarioConfig, ConfigError> {
    Scenario::named(name, latency, size).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}
