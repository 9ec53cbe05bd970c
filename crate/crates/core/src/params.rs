//! String-keyed parameter bags for registry factories.
//!
//! Factories pull the keys they understand with typed getters; whatever is
//! left over when the factory finishes is reported as an unknown key.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Params {
    entries: BTreeMap<String, String>,
    seen: Vec<&'static str>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        let mut p = Self::new();
        for (k, v) in pairs {
            p.insert(k, v);
        }
        p
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Removes every key under `prefix` and returns them with the prefix
    /// stripped, so `defense.params.beta` becomes `beta`.
    pub fn split_prefix(&mut self, prefix: &str) -> Params {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = Params::new();
        for k in keys {
            let v = self.entries.remove(&k).unwrap();
            out.insert(&k[prefix.len()..], v);
        }
        out
    }

    fn take(&mut self, key: &'static str) -> Option<String> {
        self.seen.push(key);
        self.entries.remove(key)
    }

    pub fn parse<T: std::str::FromStr>(&mut self, key: &'static str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`"))),
        }
    }

    pub fn f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v: f64 = self.parse(key, default)?;
        if v.is_nan() {
            return Err(Error::Config(format!("`{key}` is NaN")));
        }
        Ok(v)
    }

    /// A strictly positive real.
    pub fn positive(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if v <= 0.0 {
            return Err(Error::Config(format!("`{key}` must be > 0, got {v}")));
        }
        Ok(v)
    }

    pub fn usize(&mut self, key: &'static str, default: usize) -> Result<usize> {
        self.parse(key, default)
    }

    pub fn opt<T: std::str::FromStr>(&mut self, key: &'static str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`"))),
        }
    }

    pub fn opt_usize(&mut self, key: &'static str) -> Result<Option<usize>> {
        self.opt(key)
    }

    /// An optional finite real.
    pub fn opt_f64(&mut self, key: &'static str) -> Result<Option<f64>> {
        match self.opt::<f64>(key)? {
            Some(v) if !v.is_finite() => Err(Error::Config(format!("`{key}` must be finite, got {v}"))),
            v => Ok(v),
        }
    }

    pub fn opt_positive(&mut self, key: &'static str) -> Result<Option<f64>> {
        match self.opt_f64(key)? {
            Some(v) if v <= 0.0 => Err(Error::Config(format!("`{key}` must be > 0, got {v}"))),
            v => Ok(v),
        }
    }

    pub fn bool(&mut self, key: &'static str, default: bool) -> Result<bool> {
        self.parse(key, default)
    }

    pub fn string(&mut self, key: &'static str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    /// Fails on any key no getter asked for, suggesting the closest known key.
    pub fn finish(self, owner: &str) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            let suggestions = crate::registry::suggest(key, self.seen.iter().copied());
            return Err(Error::UnknownName {
                kind: "parameter",
                name: format!("{owner}.{key}"),
                suggestions,
            });
        }
        Ok(())
    }
}
