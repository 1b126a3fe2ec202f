//! Flat `key = value` configuration files. `#` starts a comment.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    /// `(key, value, line)` in file order.
    pub entries: Vec<(String, String, usize)>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse_line(line_no, format!("expected `key = value`, found `{line}`")));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse_line(line_no, "empty key"));
            }
            if entries.iter().any(|(k, _, _)| k == key) {
                return Err(Error::parse_line(line_no, format!("duplicate key `{key}`")));
            }
            entries.push((key.to_string(), value.trim().to_string(), line_no));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v, _)| format!("{k} = {v}\n")).collect()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        let line = self.entries.len() + 1;
        self.entries.push((key.to_string(), value.to_string(), line));
    }
}

/// Parses `value` into `field`, reporting failures at `line`.
pub fn assign<T: FromStr>(field: &mut T, key: &str, value: &str, line: usize) -> Result<()> {
    *field = value
        .parse()
        .map_err(|_| Error::parse_line(line, format!("invalid value `{value}` for `{key}`")))?;
    Ok(())
}

/// Error for a key a config section does not know.
pub fn unknown_key(key: &str, line: usize) -> Error {
    Error::parse_line(line, format!("unknown key `{key}`"))
}
