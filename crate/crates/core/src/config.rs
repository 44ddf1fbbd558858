//! Line-based `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Each configuration
//! struct claims the keys it recognizes; unknown keys are an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration struct that can be filled from string key/value pairs.
pub trait Configurable {
    /// Applies one setting. Returns `Ok(false)` if the key is not recognized.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Parses `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies every pair to the first target that recognizes its key.
pub fn apply_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    targets: &mut [&mut dyn Configurable],
) -> Result<()> {
    'pairs: for (k, v) in pairs {
        for t in targets.iter_mut() {
            if t.set(k, v)? {
                continue 'pairs;
            }
        }
        return Err(Error::config(format!("unknown configuration key `{k}`")));
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_pairs(&text)
}
