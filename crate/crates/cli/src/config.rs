use std::path::{Path, PathBuf};

use rewardrank_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Config file layout shared by all subcommands. `params` mirrors the
/// command's module config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig<T> {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub params: T,
}

impl<T: Default> Default for RunConfig<T> {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            seed: None,
            out: None,
            params: T::default(),
        }
    }
}

impl<T: Default + DeserializeOwned> RunConfig<T> {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if cfg.schema_version > RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is newer than supported {}",
                cfg.schema_version, RUN_CONFIG_SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }

    /// Flag value, then file value.
    pub fn out(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.out.clone())
            .ok_or_else(|| Error::Config("an output path is required (--out or \"out\" in the config)".into()))
    }
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
