//! Flat `key=value` text files.
//!
//! All on-disk configuration (preprocess, training, cost profiles, model
//! configs, run manifests) uses the same trivial format: one `key=value` per
//! line, `#` starts a comment, blank lines ignored. Values stay strings here;
//! each consumer parses the types it needs.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: missing '=' separator")]
    MissingSeparator { line: usize },
    #[error("line {line}: empty key")]
    EmptyKey { line: usize },
    #[error("duplicate key `{key}`")]
    DuplicateKey { key: String },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("key `{key}`: cannot parse `{value}` as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
}

/// Parsed key-value file with typed accessors. Keys are unique; iteration is
/// sorted, so re-serialization is deterministic.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(KvError::MissingSeparator { line: i + 1 })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(KvError::EmptyKey { line: i + 1 });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(KvError::DuplicateKey {
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::MissingKey {
            key: key.to_string(),
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        wanted: &'static str,
    ) -> Result<Option<T>, KvError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                wanted,
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Deterministic serialization: sorted by key, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.iter() {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
