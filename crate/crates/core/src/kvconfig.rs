//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Later
//! entries override earlier ones, which is also how inline overrides are
//! layered on top of a file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    Invalid { key: String, value: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("{0}")]
    Constraint(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_assignment(line).map_err(|_| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: 0,
                text: assignment.to_string(),
            });
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Invalid {
                key: key.to_string(),
                value: v.to_string(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::Unknown(k.to_string())),
            None => Ok(()),
        }
    }

    /// Keeps only the listed keys.
    pub fn subset(&self, keys: &[&str]) -> KvConfig {
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keys.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Serializes in key order, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
