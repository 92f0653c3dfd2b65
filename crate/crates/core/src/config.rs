//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Typed configuration structs read and write their fields under a dotted
//! prefix (`train.seed`, `encoder.channels`, ...) through [`FlatFields`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }

    /// Overlay `other` on top of `self`.
    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> FlatConfig {
        let p = format!("{prefix}.");
        FlatConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn reject_unknown<'a>(&self, known: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let known: Vec<&str> = known.into_iter().collect();
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Configuration structs that round-trip through a [`FlatConfig`].
pub trait FlatFields: Sized + Default {
    fn write_fields(&self, prefix: &str, out: &mut FlatConfig);
    fn read_fields(&mut self, prefix: &str, cfg: &FlatConfig) -> Result<()>;

    fn from_flat(prefix: &str, cfg: &FlatConfig) -> Result<Self> {
        let mut out = Self::default();
        out.read_fields(prefix, cfg)?;
        Ok(out)
    }

    fn to_flat(&self, prefix: &str) -> FlatConfig {
        let mut out = FlatConfig::new();
        self.write_fields(prefix, &mut out);
        out
    }

    fn known_keys(prefix: &str) -> Vec<String> {
        Self::default().to_flat(prefix).keys().cloned().collect()
    }
}

pub(crate) fn key(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// Implements [`FlatFields`] for a struct whose listed fields are all
/// `Display + FromStr`.
macro_rules! flat_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::FlatFields for $ty {
            fn write_fields(&self, prefix: &str, out: &mut $crate::config::FlatConfig) {
                $( out.set($crate::config::key(prefix, stringify!($field)), &self.$field); )*
            }
            fn read_fields(&mut self, prefix: &str, cfg: &$crate::config::FlatConfig) -> $crate::error::Result<()> {
                $(
                    if let Some(v) = cfg.get($crate::config::key(prefix, stringify!($field)).as_str())? {
                        self.$field = v;
                    }
                )*
                Ok(())
            }
        }
    };
}
pub(crate) use flat_fields;
