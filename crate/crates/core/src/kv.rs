//! Flat `key = value` text blocks.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may carry a
//! dotted section prefix (`partition.r0`). Floats are written with Rust's
//! shortest round-trip formatting so a write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvBlock {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key `{key}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: *line,
                msg: format!("cannot parse value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvBlock {
        let p = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        KvBlock { entries }
    }

    pub fn merge_section(&mut self, prefix: &str, other: &KvBlock) {
        for (k, (_, v)) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), (0, v.clone()));
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, (_, v)) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
