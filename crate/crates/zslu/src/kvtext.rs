//! Minimal sectioned key/value text format used for the experiment config and
//! the world file. Lines are `key = value` grouped under `[section]` headers;
//! `#` starts a comment. Serialization is canonical (sections and keys sorted)
//! so the same document always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing key `{key}` in section `[{section}]`")]
    Missing { section: String, key: String },
    #[error("key `{key}` in section `[{section}]`: {msg}")]
    Value {
        section: String,
        key: String,
        msg: String,
    },
}

/// An ordered-by-name document of `[section] key = value` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl fmt::Display) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, KvError> {
        self.get(section, key).ok_or_else(|| KvError::Missing {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    pub fn section_keys(&self, section: &str) -> Vec<&str> {
        self.sections
            .get(section)
            .map(|m| m.keys().map(|k| k.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, KvError> {
        let raw = self.require(section, key)?;
        raw.parse().map_err(|_| KvError::Value {
            section: section.to_string(),
            key: key.to_string(),
            msg: format!("cannot parse `{raw}`"),
        })
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<u64, KvError> {
        self.parse_value(section, key)
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<usize, KvError> {
        self.parse_value(section, key)
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<f64, KvError> {
        self.parse_value(section, key)
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<bool, KvError> {
        self.parse_value(section, key)
    }

    pub fn get_list(&self, section: &str, key: &str) -> Result<Vec<String>, KvError> {
        let raw = self.require(section, key)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        Ok(raw.split(',').map(|s| s.trim().to_string()).collect())
    }

    pub fn get_usize_list(&self, section: &str, key: &str) -> Result<Vec<usize>, KvError> {
        self.get_list(section, key)?
            .iter()
            .map(|s| {
                s.parse().map_err(|_| KvError::Value {
                    section: section.to_string(),
                    key: key.to_string(),
                    msg: format!("cannot parse `{s}` as integer"),
                })
            })
            .collect()
    }

    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>, KvError> {
        self.get_list(section, key)?
            .iter()
            .map(|s| {
                s.parse().map_err(|_| KvError::Value {
                    section: section.to_string(),
                    key: key.to_string(),
                    msg: format!("cannot parse `{s}` as number"),
                })
            })
            .collect()
    }

    /// Canonical rendering: sections and keys in sorted order, `key = value`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = KvDoc::new();
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| KvError::Parse {
                    line: i + 1,
                    msg: "unterminated section header".to_string(),
                })?;
                section = name.trim().to_string();
                doc.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| KvError::Parse {
                line: i + 1,
                msg: "expected `key = value`".to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Parse {
                    line: i + 1,
                    msg: "empty key".to_string(),
                });
            }
            let entries = doc.sections.entry(section.clone()).or_default();
            if entries.contains_key(key) {
                return Err(KvError::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(doc)
    }
}
