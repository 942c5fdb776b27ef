//! Run configuration: a TOML document layered over a named preset.
//!
//! ```toml
//! preset = "sa3"
//! seed = 7
//!
//! [model]
//! imputations = 100
//!
//! [scenario]
//! countries = 4
//! ```

use serde::{Deserialize, Serialize};

use crate::cardmatch::SolverOptions;
use crate::error::{Error, Result};
use crate::geomatch::CaliperSpec;
use crate::model::{BirthFilter, ModelSpec, SensitivityParams};
use crate::sensan::default_grid;
use crate::synth::ScenarioConfig;

pub const PRESETS: [&str; 6] = ["primary", "sa1", "sa2", "sa3", "sa4", "quickstart"];
pub const DEFAULT_SEED: u64 = 20_200_101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    /// `(p1, p2)` grid in percentage points.
    pub grid: Vec<[f64; 2]>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            grid: default_grid().into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub seed: u64,
    pub model: ModelSpec,
    pub caliper: CaliperSpec,
    pub solver: SolverOptions,
    pub sensitivity: SensitivityConfig,
    pub scenario: ScenarioConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            preset: "primary".into(),
            seed: DEFAULT_SEED,
            model: ModelSpec::default(),
            caliper: CaliperSpec::default(),
            solver: SolverOptions::default(),
            sensitivity: SensitivityConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Config {
            preset: name.to_string(),
            ..Config::default()
        };
        match name {
            "primary" => {}
            "sa1" => c.model.birth_filter = BirthFilter::InfantsOnly,
            "sa2" => c.model.birth_filter = BirthFilter::FirstBornOnly,
            "sa3" => {
                c.model.cutoff_high = 0.45;
                c.model.cutoff_low = 0.15;
            }
            "sa4" => {
                c.model.cutoff_high = 0.5;
                c.model.cutoff_low = 0.1;
            }
            "quickstart" => c.model.imputations = 50,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Parses a TOML document. Keys it sets override the preset named by
    /// `preset_override`, else by its own `preset` key, else `primary`.
    pub fn from_toml_str(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
        let name = match (preset_override, doc.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => "primary".to_string(),
        };
        let base = Config::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        merged.insert("preset".into(), toml::Value::String(name));
        let cfg: Config = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, preset_override: Option<&str>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml_str(&text, preset_override)
            }
            None => {
                let cfg = Self::preset(preset_override.unwrap_or("primary"))?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenario.validate()?;
        if !(self.caliper.width_sd >= 0.0) || !(self.caliper.penalty_factor > 0.0) {
            return Err(Error::Config("caliper width must be >= 0 and penalty factor > 0".into()));
        }
        Ok(())
    }

    pub fn sensitivity_grid(&self) -> Vec<(f64, f64)> {
        self.sensitivity.grid.iter().map(|g| (g[0], g[1])).collect()
    }

    /// Grid points that fail the probability check, for early reporting.
    pub fn invalid_grid_points(&self) -> Vec<(f64, f64)> {
        self.sensitivity_grid()
            .into_iter()
            .filter(|&(a, b)| SensitivityParams::new(a, b).is_err())
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_cutoffs() {
        let sa3 = Config::preset("sa3").unwrap();
        assert_eq!((sa3.model.cutoff_high, sa3.model.cutoff_low), (0.45, 0.15));
        let sa4 = Config::preset("sa4").unwrap();
        assert_eq!((sa4.model.cutoff_high, sa4.model.cutoff_low), (0.5, 0.1));
        assert_eq!(Config::preset("primary").unwrap().model.imputations, 500);
        assert_eq!(Config::preset("quickstart").unwrap().model.imputations, 50);
        assert!(Config::preset("nope").is_err());
    }

    #[test]
    fn file_overrides_preset() {
        let c = Config::from_toml_str("preset = \"sa4\"\nseed = 3\n[model]\nimputations = 20\n", None).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.imputations, 20);
        assert_eq!(c.model.cutoff_low, 0.1);
        let c = Config::from_toml_str("[model]\ncutoff_low = 0.12\n", Some("sa3")).unwrap();
        assert_eq!((c.model.cutoff_high, c.model.cutoff_low), (0.45, 0.12));
    }

    #[test]
    fn round_trip_and_errors() {
        let c = Config::preset("sa1").unwrap();
        let back = Config::from_toml_str(&c.to_toml(), None).unwrap();
        assert_eq!(back, c);
        assert!(matches!(Config::from_toml_str("bogus = 1", None), Err(Error::Config(_))));
        assert!(matches!(
            Config::from_toml_str("[model]\ncutoff_low = 0.9\n", None),
            Err(Error::Config(_))
        ));
    }
}
