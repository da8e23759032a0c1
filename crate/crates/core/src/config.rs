//! Flat `key = value` text configuration.
//!
//! Keys carry their section as a dotted prefix (`sampling.grid_size = 0.25`).
//! A `[section]` line sets a prefix for the keys that follow it. `#` starts a
//! comment. Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            entries.insert(full, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key}: item {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Entries whose key starts with `prefix.`, with the prefix stripped.
    pub fn section<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries.iter().filter_map(move |(k, v)| {
            k.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .map(|rest| (rest, v.as_str()))
        })
    }

    /// The entries of `section` as a standalone set.
    pub fn subsection(&self, prefix: &str) -> KeyValues {
        KeyValues {
            entries: self.section(prefix).map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let kv = KeyValues::parse(
            "# top\nseed = 7\n[sampling]\ngrid_size = 0.25 # inline\nk_local=120000\n",
        )
        .unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.get::<f64>("sampling.grid_size").unwrap(), Some(0.25));
        assert_eq!(kv.get::<usize>("sampling.k_local").unwrap(), Some(120_000));
        let keys: Vec<_> = kv.section("sampling").map(|(k, _)| k).collect();
        assert_eq!(keys, vec!["grid_size", "k_local"]);
        let sub = kv.subsection("sampling");
        assert_eq!(sub.get::<usize>("k_local").unwrap(), Some(120_000));
        assert_eq!(sub.get::<u64>("seed").unwrap(), None);
    }

    #[test]
    fn bad_line_and_bad_value() {
        assert!(KeyValues::parse("nonsense").is_err());
        let kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.get::<f64>("a").is_err());
        let kv = KeyValues::parse("l = 1, 2,3").unwrap();
        assert_eq!(kv.get_list::<u16>("l").unwrap(), Some(vec![1, 2, 3]));
    }
}
