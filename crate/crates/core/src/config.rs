//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key must be consumed by the reader, so misspelled keys are errors
//! rather than silently ignored settings.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", n + 1)));
            }
            if entries.insert(key.to_owned(), (n + 1, v.trim().to_owned())).is_some() {
                return Err(Error::Config(format!("{source}:{}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(KeyValues {
            entries,
            source: source.to_owned(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Removes and parses `key`, or returns `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| Error::Config(format!("{}:{line}: {key} = {v:?}: {e}", self.source))),
        }
    }

    /// Comma-separated list of exactly `N` values.
    pub fn take_array<T: FromStr + Copy, const N: usize>(&mut self, key: &str, default: [T; N]) -> Result<[T; N]>
    where
        T::Err: Display,
    {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(default);
        };
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != N {
            return Err(Error::Config(format!(
                "{}:{line}: {key} needs {N} comma-separated values, got {}",
                self.source,
                parts.len()
            )));
        }
        let mut out = default;
        for (slot, p) in out.iter_mut().zip(parts) {
            *slot = p
                .parse()
                .map_err(|e| Error::Config(format!("{}:{line}: {key}: {p:?}: {e}", self.source)))?;
        }
        Ok(out)
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => {
                let all: Vec<&str> = self.entries.keys().map(String::as_str).collect();
                Err(Error::Config(format!("{}:{line}: unknown key {k:?} (unused: {})", self.source, all.join(", "))))
            }
        }
    }
}
