//! Optional TOML configuration. Command-line flags and `SHE_*` environment
//! variables take precedence over values read here.
//!
//! ```toml
//! [detect]
//! gamma = 0.5
//! theta = 0.5
//! text_layer = 3
//! layers = [3]
//!
//! [mitigate]
//! alpha_base = 4.5
//! direction = "span-mean"
//!
//! [snowball]
//! carryover = 0.5
//! trials = 100
//! kinds = [{ kind = "gaussian-noise", sigma = 1.5 }, { kind = "occlusion", fraction = 0.2 }]
//! ```

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use she_core::snowball::Perturbation;
use she_core::DirectionMode;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub detect: DetectSection,
    pub mitigate: MitigateSection,
    pub snowball: SnowballSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub gamma: Option<f64>,
    pub theta: Option<f64>,
    pub text_layer: Option<usize>,
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigateSection {
    pub alpha_base: Option<f64>,
    pub fixed_alpha: Option<f64>,
    pub direction: Option<DirectionMode>,
    pub text_layer: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowballSection {
    pub carryover: Option<f64>,
    pub emission_threshold: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub kinds: Option<Vec<Perturbation>>,
    pub text_layer: Option<usize>,
    pub layers: Option<Vec<usize>>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
