//! Plain-text run configuration: `key = value` lines with optional
//! `[section]` headers. Section names prefix keys as `section.key`.

use crate::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

pub fn parse_config_text(text: &str) -> Result<ConfigMap> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: unterminated section header", lineno + 1),
            })?;
            let name = name.trim();
            if !valid_key(name) {
                return Err(Error::Format {
                    what: "config",
                    detail: format!("line {}: invalid section name {name:?}", lineno + 1),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "config",
            detail: format!("line {}: expected key = value", lineno + 1),
        })?;
        let key = key.trim();
        if !valid_key(key) {
            return Err(Error::Format {
                what: "config",
                detail: format!("line {}: invalid key {key:?}", lineno + 1),
            });
        }
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        if entries.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Format {
                what: "config",
                detail: format!("line {}: duplicate key {full}", lineno + 1),
            });
        }
    }
    Ok(ConfigMap { entries })
}

impl ConfigMap {
    pub fn load(path: &std::path::Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed lookup; `section.key` is tried first, then the bare key.
    pub fn lookup<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let raw = self
            .get(&format!("{section}.{key}"))
            .or_else(|| self.get(key));
        match raw {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|_| Error::Config(format!(
                "config key {key}: cannot parse {s:?}"
            ))),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let text = "\n# header\nseed = 7\n[train]\nepochs = 200\nlr = 1e-4\n[sampler]\noperands = reciprocal\n";
        let cfg = parse_config_text(text).unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("train.epochs"), Some("200"));
        assert_eq!(cfg.get("sampler.operands"), Some("reciprocal"));
        assert_eq!(cfg.lookup::<u64>("train", "epochs").unwrap(), Some(200));
        assert_eq!(cfg.lookup::<f64>("train", "lr").unwrap(), Some(1e-4));
        // section-qualified beats bare
        assert_eq!(cfg.lookup::<u64>("train", "seed").unwrap(), Some(7));
        assert_eq!(cfg.lookup::<u64>("train", "missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config_text("no equals sign").is_err());
        assert!(parse_config_text("[unclosed\n").is_err());
        assert!(parse_config_text("[bad name!]\n").is_err());
        assert!(parse_config_text("a b = 1").is_err());
        assert!(parse_config_text("= 1").is_err());
        assert!(parse_config_text("a = 1\na = 2").is_err());
        let cfg = parse_config_text("a = 1").unwrap();
        assert!(cfg.lookup::<u64>("", "a").unwrap() == Some(1));
        assert!(parse_config_text("a = x").unwrap().lookup::<u64>("", "a").is_err());
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in "\\PC*") {
            let _ = parse_config_text(&text);
        }

        #[test]
        fn roundtrips_simple_pairs(
            pairs in proptest::collection::btree_map("[a-z][a-z0-9_]{0,8}", "[ -<>-~]{0,12}", 0..8)
        ) {
            let text: String = pairs
                .iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            let cfg = parse_config_text(&text).unwrap();
            for (k, v) in &pairs {
                prop_assert_eq!(cfg.get(k), Some(v.trim()));
            }
        }
    }
}
