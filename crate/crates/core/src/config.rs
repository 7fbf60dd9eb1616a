//! Structured configuration files.
//!
//! A config file is TOML with three optional sections:
//!
//! ```toml
//! [gp]                      # any GpParams field
//! episodes_per_eval = 3
//! reevaluate_elites = true
//!
//! [weights]                 # preset plus per-field overrides
//! preset = "table2"
//! delta = 150.0
//!
//! [profiles.windy]          # extra named profiles
//! probabilities = { localization_failure = 0.1, pick_failure = 0.1, place_failure = 0.0, losing_cube = 0.05, losing_localization = 0.1 }
//! timing = { localise = 5.0, head = 1.0, tuck = 2.0, pick = 5.0, place = 5.0, travel_speed = 0.5, safe_path_factor = 2.0 }
//! ```
//!
//! `geometry`, `timing` and `risky_path` may be left out of a profile; each
//! present sub-table must be complete.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::FitnessWeights;
use crate::gp::{GpError, GpParams};
use crate::sim::{FailureProbabilities, Geometry, PathRisk, Profile, SimError, Timing};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown weight preset {0:?} (known: table2)")]
    UnknownPreset(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Profile(#[from] SimError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub preset: Option<String>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub alpha3: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub pick_reward: Option<f64>,
    pub place_reward: Option<f64>,
}

impl WeightsSection {
    pub fn resolve(&self) -> Result<FitnessWeights, ConfigError> {
        let preset = self.preset.as_deref().unwrap_or("table2");
        let base = FitnessWeights::builtin(preset).ok_or_else(|| ConfigError::UnknownPreset(preset.to_string()))?;
        let w = FitnessWeights {
            alpha1: self.alpha1.unwrap_or(base.alpha1),
            alpha2: self.alpha2.unwrap_or(base.alpha2),
            alpha3: self.alpha3.unwrap_or(base.alpha3),
            beta: self.beta.unwrap_or(base.beta),
            gamma: self.gamma.unwrap_or(base.gamma),
            delta: self.delta.unwrap_or(base.delta),
            pick_reward: self.pick_reward.unwrap_or(base.pick_reward),
            place_reward: self.place_reward.unwrap_or(base.place_reward),
        };
        w.validate().map_err(ConfigError::Weights)?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub probabilities: FailureProbabilities,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub risky_path: Option<PathRisk>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub gp: Option<GpParams>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileSection>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.weights.resolve()?;
        if let Some(gp) = &cfg.gp {
            gp.validate()?;
        }
        for name in cfg.profiles.keys() {
            cfg.profile(name)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// A profile defined in this file, or else a built-in one.
    pub fn profile(&self, name: &str) -> Result<Profile, ConfigError> {
        let Some(section) = self.profiles.get(name) else {
            return Ok(Profile::builtin(name)?);
        };
        let profile = Profile {
            name: name.to_string(),
            probabilities: section.probabilities,
            geometry: section.geometry,
            timing: section.timing,
            risky_path: section.risky_path,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn weights(&self) -> FitnessWeights {
        self.weights.resolve().expect("validated on load")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ConfigFile::from_toml("").unwrap();
        assert_eq!(cfg.weights(), FitnessWeights::TABLE2);
        assert_eq!(cfg.profile("stoch2").unwrap(), Profile::builtin("stoch2").unwrap());
        assert!(cfg.gp.is_none());
    }

    #[test]
    fn full_example() {
        let text = r#"
            [gp]
            episodes_per_eval = 3
            generations = 50

            [weights]
            delta = 150.0

            [profiles.windy]
            probabilities = { localization_failure = 0.1, pick_failure = 0.1, place_failure = 0.0, losing_cube = 0.05, losing_localization = 0.1 }
            risky_path = { losing_cube = 0.2, losing_localization = 0.4 }
        "#;
        let cfg = ConfigFile::from_toml(text).unwrap();
        let gp = cfg.gp.clone().unwrap();
        assert_eq!((gp.episodes_per_eval, gp.generations, gp.population), (3, 50, 30));
        assert_eq!(cfg.weights(), FitnessWeights::TABLE2.with_delta(150.0));
        let p = cfg.profile("windy").unwrap();
        assert_eq!(p.probabilities.pick_failure, 0.1);
        assert_eq!(p.timing, Timing::default());
        assert_eq!(p.risky_path.unwrap().losing_localization, 0.4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(ConfigFile::from_toml("[weights]\npreset = \"nope\""), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(ConfigFile::from_toml("[weights]\nbeta = -1.0"), Err(ConfigError::Weights(_))));
        assert!(matches!(ConfigFile::from_toml("[gp]\npopulation = 1"), Err(ConfigError::Gp(_))));
        let bad = "[profiles.x]\nprobabilities = { localization_failure = 1.5, pick_failure = 0.0, place_failure = 0.0, losing_cube = 0.0, losing_localization = 0.0 }";
        assert!(matches!(ConfigFile::from_toml(bad), Err(ConfigError::Profile(_))));
        assert!(matches!(ConfigFile::from_toml("[bogus]"), Err(ConfigError::Parse(_))));
        assert!(matches!(ConfigFile::from_toml("[gp]\npopulaton = 3"), Err(ConfigError::Parse(_))));
    }
}
