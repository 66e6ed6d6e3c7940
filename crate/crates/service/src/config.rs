//! Service and CLI configuration: a TOML file overlaid with `ALARM_*`
//! environment variables.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use alarm_core::{CounterKind, DetectorParams, Projection};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {var}: cannot parse {value:?}")]
    Env { var: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorDefaults {
    pub chains: usize,
    pub depth: usize,
    /// Projection width; 0 disables projection.
    pub dims: usize,
    /// Count-min counters instead of exact ones.
    pub count_min: bool,
    pub seed: u64,
}

impl Default for DetectorDefaults {
    fn default() -> Self {
        let p = DetectorParams::default();
        Self {
            chains: p.chains,
            depth: p.depth,
            dims: 0,
            count_min: false,
            seed: p.seed,
        }
    }
}

impl DetectorDefaults {
    pub fn params(&self) -> DetectorParams {
        DetectorParams {
            chains: self.chains,
            depth: self.depth,
            projection: if self.dims == 0 {
                Projection::None
            } else {
                Projection::Hashed { dims: self.dims }
            },
            counter: if self.count_min {
                CounterKind::DEFAULT_CMS
            } else {
                CounterKind::Exact
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub rule_db: PathBuf,
    pub detector: DetectorDefaults,
    /// Training preset for `simulate`: `desk` or `paper`.
    pub simulator_preset: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("alarm-data"),
            rule_db: PathBuf::from("alarm-data/rules.jsonl"),
            detector: DetectorDefaults::default(),
            simulator_preset: "desk".into(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Env {
        var: var.into(),
        value: value.into(),
    })
}

impl ServiceConfig {
    /// Defaults, then the file if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.into(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse {
                    path: p.into(),
                    source,
                })?
            }
            None => Self::default(),
        };
        for (var, value) in env {
            let Some(key) = var.strip_prefix("ALARM_") else {
                continue;
            };
            match key {
                "BIND" => config.bind = parse_env(&var, &value)?,
                "DATA_DIR" => config.data_dir = value.into(),
                "RULE_DB" => config.rule_db = value.into(),
                "CHAINS" => config.detector.chains = parse_env(&var, &value)?,
                "DEPTH" => config.detector.depth = parse_env(&var, &value)?,
                "DIMS" => config.detector.dims = parse_env(&var, &value)?,
                "COUNT_MIN" => config.detector.count_min = parse_env(&var, &value)?,
                "SEED" => config.detector.seed = parse_env(&var, &value)?,
                "SIMULATOR_PRESET" => config.simulator_preset = value,
                _ => log::debug!("ignoring unknown variable {var}"),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.detector
            .params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if alarm_sim::TrainConfig::preset(&self.simulator_preset).is_none() {
            return Err(ConfigError::Invalid(format!(
                "unknown simulator preset {:?}",
                self.simulator_preset
            )));
        }
        Ok(())
    }

    /// Create the data directory and check the rule store can be opened.
    pub fn prepare_dirs(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.data_dir)?;
        if let Some(parent) = self.rule_db.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}
