//! Flat `key = value` text, one pair per line. Blank lines and lines
//! starting with `#` are skipped.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::{Error, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                n + 1
            )));
        }
    }
    Ok(out)
}

/// Removes `key` from `map` and parses it, if present.
pub fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
    }
}

/// Fails if any key was left unconsumed.
pub fn finish(map: &BTreeMap<String, String>) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
    }
}
