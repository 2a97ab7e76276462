//! The desk-scale reference configuration shipped with the repository.

use crate::error::Result;
use crate::suite::ExperimentConfig;

/// Contents of `configs/reference.toml`.
pub const REFERENCE_TOML: &str = include_str!("../../../configs/reference.toml");

pub fn reference_config() -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(REFERENCE_TOML)
}
