//! Flat `key = value` text records. Blank lines and `#` comments are skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::invalid(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::invalid(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Removes and parses `key`, keeping `current` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, current: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *current = raw
                .parse()
                .map_err(|e| Error::invalid(format!("`{key} = {raw}`: {e}")))?;
        }
        Ok(())
    }

    /// Fails if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::invalid(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds every entry of `other`, replacing existing keys.
    pub fn extend(&mut self, other: KvMap) {
        self.entries.extend(other.entries);
    }
}

/// One `key = value` line per entry, sorted by key.
impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses `1,2,3` (empty string is the empty list).
pub fn parse_list(raw: &str) -> Result<Vec<usize>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::invalid(format!("list item `{s}`: {e}")))
        })
        .collect()
}

pub fn format_list(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Parses an inclusive range `lo:hi` (or a single value `n` meaning `n:n`).
pub fn parse_range(raw: &str) -> Result<(usize, usize)> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("range `{raw}`: {e}")))
    };
    match raw.split_once(':') {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => {
            let n = num(raw)?;
            Ok((n, n))
        }
    }
}

pub fn format_range((lo, hi): (usize, usize)) -> String {
    format!("{lo}:{hi}")
}
