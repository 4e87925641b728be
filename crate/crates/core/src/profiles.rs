//! Shipped configuration profiles.
//!
//! Two profiles ship embedded: `qwen` (strict thresholds for a sharply
//! calibrated judge head) and `glm` (every confidence bar lowered for a less
//! polarised cross-family judge). Thresholds were fitted per model pair on a
//! small calibration set; deploying a new pair means re-fitting them, not
//! reusing either profile blindly.

use std::path::Path;

use thiserror::Error;

use crate::policy::{PolicyConfig, PolicyError};

pub const QWEN_PROFILE_TOML: &str = include_str!("../assets/profiles/qwen.toml");
pub const GLM_PROFILE_TOML: &str = include_str!("../assets/profiles/glm.toml");

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown profile {0:?} (available: qwen, glm)")]
    Unknown(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config in {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Invalid(#[from] PolicyError),
}

pub fn parse_profile(toml_text: &str, origin: &str) -> Result<PolicyConfig, ProfileError> {
    let cfg: PolicyConfig = toml::from_str(toml_text).map_err(|e| ProfileError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Looks up an embedded profile by name.
pub fn builtin_profile(name: &str) -> Result<PolicyConfig, ProfileError> {
    match name {
        "qwen" => parse_profile(QWEN_PROFILE_TOML, "builtin:qwen"),
        "glm" => parse_profile(GLM_PROFILE_TOML, "builtin:glm"),
        other => Err(ProfileError::Unknown(other.to_string())),
    }
}

/// Loads a config file from disk.
pub fn load_profile(path: &Path) -> Result<PolicyConfig, ProfileError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: display.clone(),
        source,
    })?;
    parse_profile(&text, &display)
}

/// Serializes an effective config back to TOML (reports echo this).
pub fn to_toml(cfg: &PolicyConfig) -> String {
    toml::to_string(cfg).expect("policy config serializes")
}
