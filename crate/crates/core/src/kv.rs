//! The flat `key = value` text format used for config files and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. `[name]` starts a
//! section; keys before the first header belong to the unnamed section `""`.
//! Keys may repeat; readers decide what repetition means.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDocument {
    /// `(section, key, value)` in file order.
    pub entries: Vec<(String, String, String)>,
}

impl KvDocument {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut section = String::new();
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected `key = value`, got `{line}`", n + 1),
                ));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::format(origin, format!("line {}: empty key", n + 1)));
            }
            entries.push((section.clone(), key.to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn has_sections(&self) -> bool {
        self.entries.iter().any(|(s, _, _)| !s.is_empty())
    }

    pub fn section<'a>(&'a self, name: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .iter()
            .filter(move |(s, _, _)| s == name)
            .map(|(_, k, v)| (k.as_str(), v.as_str()))
    }

    /// Last value of `key` in `section`.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(s, k, _)| s == section && k == key)
            .map(|(_, _, v)| v.as_str())
    }
}

/// Appends `key = value` lines, one per pair, under an optional header.
pub fn write_section(out: &mut String, name: &str, pairs: &[(String, String)]) {
    if !name.is_empty() {
        out.push_str(&format!("[{name}]\n"));
    }
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push('\n');
}
