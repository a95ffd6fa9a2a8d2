//! Plain-text `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment (full-line or trailing),
//! blank lines are ignored. Keys keep first-seen order so a config round-trips
//! deterministically; reassigning a key overwrites its value in place.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered key/value map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    order: Vec<String>,
    values: HashMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            cfg.set(k, v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        if !self.values.contains_key(key) {
            self.order.push(key.to_string());
        }
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Apply a `key=value` override string (CLI `--set`).
    pub fn set_kv(&mut self, kv: &str) -> Result<(), ConfigError> {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError::Malformed {
                line: 0,
                text: kv.to_string(),
            });
        };
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.raw(key).unwrap_or(default)
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, ty: &'static str) -> Result<T, ConfigError> {
        let v = self.str(key)?;
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            ty,
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse_as(key, "usize")
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        if self.contains(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.parse_as(key, "f64")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        if self.contains(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        if self.contains(key) {
            self.parse_as(key, "u64")
        } else {
            Ok(default)
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                ty: "bool",
            }),
        }
    }

    /// Error when the config holds keys outside `allowed`; catches typos like
    /// `step = 12` silently leaving the default in force.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        let bad: Vec<&str> = self
            .order
            .iter()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(bad.join(", ")))
        }
    }

    /// Canonical text form: first-seen key order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            let _ = writeln!(out, "{} = {}", k, self.values[k]);
        }
        out
    }
}
