//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; a key may appear once.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if pairs.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            pairs.push((key.to_owned(), value.trim().to_owned()));
        }
        Ok(KeyValues(pairs))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_owned(), value.to_string()));
    }
}

/// Parses `value` for `key`, naming both on failure.
pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// `true/false`, `on/off`, `1/0`.
pub fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad flag `{value}` for `{key}`"))),
    }
}

/// Comma-separated list.
pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KeyValues::parse("# run\n lr = 2e-4\n\nbatch_size=16\n").unwrap();
        assert_eq!(kv.0, vec![("lr".into(), "2e-4".into()), ("batch_size".into(), "16".into())]);
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("lr 2e-4").is_err());
        assert!(KeyValues::parse("= 3").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(parse_value::<f64>("lr", "fast").is_err());
        assert!(parse_flag("detach_s2", "maybe").is_err());
        assert_eq!(parse_list::<f64>("w", "0.1, 0.2").unwrap(), vec![0.1, 0.2]);
    }
}
