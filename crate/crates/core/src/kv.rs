//! Flat `key = value` text used for run configs and checkpoint config echoes.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("{key}: cannot parse {value:?}")]
    Unparsable { key: String, value: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
}

/// Keys are unique; a later assignment overrides an earlier one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = KvMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            map.set(k, v.trim());
        }
        Ok(map)
    }

    /// Parses a single `key=value` override.
    pub fn parse_override(text: &str) -> Result<(String, String), KvError> {
        match text.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(KvError::Malformed {
                line: 0,
                text: text.to_string(),
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Removes `key` and parses it into `slot` when present.
    pub fn take_parse<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<(), KvError> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v.parse().map_err(|_| KvError::Unparsable {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn ensure_consumed(&self) -> Result<(), KvError> {
        match self.entries.keys().next() {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}
