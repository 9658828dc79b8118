//! Plain-text run configuration.
//!
//! One `key = value` pair per line. Blank lines and lines starting with `#`
//! are ignored, keys are `[a-z0-9_-]+`, values run to the end of the line
//! with surrounding whitespace trimmed, and a key may appear once.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: Vec<(String, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected key = value"))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::parse(i + 1, format!("invalid key {key:?}")));
            }
            if out.get(key).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate key {key:?}")));
            }
            out.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(out)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::input(format!("invalid key {key:?}")));
        }
        let value = value.into();
        if value.contains('\n') {
            return Err(Error::input(format!("value of {key} contains a newline")));
        }
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").expect("write to String");
        }
        out
    }
}
