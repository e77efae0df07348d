//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! consumed by the reader; leftovers are reported as unknown keys.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("line {line}: {key} = {v:?}: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => split_list(&v)
                .map(Some)
                .map_err(|e| Error::config(format!("line {line}: {key}: {e}"))),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::config(format!("line {line}: unknown key {k:?}"))),
        }
    }
}

pub(crate) fn split_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

pub(crate) fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_reads_and_unknown_keys() {
        let mut kv = KeyValues::parse("# run\nepochs = 10\n\nlr=0.5\ndims = 4, 8\nextra = 1\n").unwrap();
        assert_eq!(kv.take::<usize>("epochs").unwrap(), Some(10));
        assert_eq!(kv.take_or::<f64>("lr", 1.0).unwrap(), 0.5);
        assert_eq!(kv.take_or::<f64>("tau", 0.07).unwrap(), 0.07);
        assert_eq!(kv.take_list::<usize>("dims").unwrap(), Some(vec![4, 8]));
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("extra") && err.contains("line 6"), "{err}");
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(matches!(KeyValues::parse("novalue"), Err(Error::Config(_))));
        assert!(matches!(KeyValues::parse("a=1\na=2"), Err(Error::Config(_))));
        let mut kv = KeyValues::parse("epochs = ten").unwrap();
        assert!(matches!(kv.take::<usize>("epochs"), Err(Error::Config(_))));
    }
}
