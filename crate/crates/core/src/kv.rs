//! Flat `key = value` text blocks: the format of config files, manifests,
//! and the text headers inside binary files.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    map: HashMap<String, String>,
    order: Vec<String>,
}

impl KvMap {
    pub fn new() -> KvMap {
        KvMap::default()
    }

    /// Parses lines of `key = value`. Blank lines and `#` comments are
    /// skipped; duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut kv = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if kv.map.contains_key(&key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            kv.order.push(key.clone());
            kv.map.insert(key, value.trim().to_string());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        if !self.map.contains_key(key) {
            self.order.push(key.to_string());
        }
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in &self.order {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.map[key]);
            out.push('\n');
        }
        out
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key {key:?}: cannot parse value {v:?}"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?.parse::<T>().map_err(|_| {
            Error::Config(format!(
                "key {key:?}: cannot parse value {:?}",
                self.raw(key).unwrap()
            ))
        })
    }

    /// Comma-separated list value; empty string means empty list.
    pub fn get_list(&self, key: &str) -> Vec<String> {
        match self.raw(key) {
            None => Vec::new(),
            Some(v) if v.trim().is_empty() => Vec::new(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    pub fn get_f32_list(&self, key: &str) -> Result<Vec<f32>> {
        self.get_list(key)
            .iter()
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|_| Error::Config(format!("key {key:?}: bad float {s:?}")))
            })
            .collect()
    }
}
