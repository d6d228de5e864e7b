//! Flat `key = value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Keys are normalised to underscores so `beam-width` and `beam_width`
/// name the same setting. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Schema(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = normalise(k);
        if key.is_empty() {
            return Err(CliError::Schema(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Schema(format!("config line {}: duplicate key {key}", i + 1)));
        }
    }
    Ok(out)
}

fn normalise(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Resolves each setting from its flag, then the config file, then a
/// default, and records the outcome for the run manifest.
#[derive(Debug, Default)]
pub struct Settings {
    pub config_path: Option<PathBuf>,
    file: BTreeMap<String, String>,
    pub resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(Settings {
            config_path: Some(path.to_path_buf()),
            file: parse_config(&text)?,
            resolved: BTreeMap::new(),
        })
    }

    pub fn from_map(file: BTreeMap<String, String>) -> Self {
        Settings {
            config_path: None,
            file,
            resolved: BTreeMap::new(),
        }
    }

    pub fn file_value(&self, key: &str) -> Option<&str> {
        self.file.get(key).map(String::as_str)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse::<T>().map_err(|e| {
                    CliError::Usage(format!("config key {key}: bad value {raw:?}: {e}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.get(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.get(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing --{}", key.replace('_', "-"))))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let raw = self.get(key, flag.map(|p| p.display().to_string()))?;
        Ok(raw.map(PathBuf::from))
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing --{}", key.replace('_', "-"))))
    }

    /// Config-file entries whose keys appear in `known`, used for model
    /// hyper-parameter overrides.
    pub fn overrides(&mut self, known: &[String]) -> BTreeMap<String, String> {
        let found: BTreeMap<String, String> = self
            .file
            .iter()
            .filter(|(k, _)| known.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, v) in &found {
            self.resolved.insert(k.clone(), v.clone());
        }
        found
    }
}
