//! `key=value` config files. Blank lines and `#` comments are ignored.
//! Consumers remove the keys they recognize; whatever remains is rejected,
//! so typos never pass silently.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<KvMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

pub fn reject_unknown(map: &KvMap) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("unknown config key {key}")));
    }
    Ok(())
}

pub fn take_parse<T: std::str::FromStr>(map: &mut KvMap, key: &str, default: T) -> Result<T> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
    }
}

pub fn take_string(map: &mut KvMap, key: &str) -> Option<String> {
    map.remove(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let map = parse_kv("# hello\n\na=1\n b = two \n").unwrap();
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "two");
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(parse_kv("a=1\na=2").is_err());
    }

    #[test]
    fn leftover_keys_rejected() {
        let map = parse_kv("mystery=1").unwrap();
        assert!(reject_unknown(&map).is_err());
    }
}
