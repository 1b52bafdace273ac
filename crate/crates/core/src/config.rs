//! Plain-text `key=value` configuration files.
//!
//! One entry per line, `#` starts a comment. Keys may carry a dotted section
//! prefix (`train.epochs = 10`); a `[train]` header applies that prefix to the
//! keys below it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
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
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: T::Err| {
                    let e = e.to_string();
                    let e = e.trim_start_matches("config error: ");
                    Error::Config(format!("key '{key}': cannot parse '{v}': {e}"))
                }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self.keys().filter(|k| !allowed.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key(s): {} (allowed: {})",
                unknown.join(", "),
                allowed.join(", ")
            )))
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
