//! Flat `key=value` configuration with layered overrides.
//!
//! Later layers win: preset defaults, then a file, then environment
//! variables, then explicit flags.

use std::path::Path;

use crate::error::{Error, Result};

pub const ENV_SEED: &str = "JOINTCYCLE_SEED";
pub const ENV_THREADS: &str = "JOINTCYCLE_THREADS";

/// Parse `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Overrides taken from the process environment through `get`.
pub fn env_overrides(get: impl Fn(&str) -> Option<String>) -> Vec<(String, String)> {
    [(ENV_SEED, "seed"), (ENV_THREADS, "threads")]
        .into_iter()
        .filter_map(|(var, key)| get(var).map(|v| (key.to_string(), v.trim().to_string())))
        .collect()
}

/// Parse a `key=value` flag.
pub fn parse_flag(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Something configurable through string keys.
pub trait KvConfig: Sized {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    /// Every key in a stable order, suitable for [`parse_kv`].
    fn entries(&self) -> Vec<(String, String)>;

    fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn apply(&mut self, layer: &[(String, String)]) -> Result<()> {
        layer.iter().try_for_each(|(k, v)| self.set(k, v))
    }
}

/// Parse a value or report the key it belongs to.
pub fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv("# header\n a = 1 \n\nb=x # note\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert!(parse_kv("novalue\n").is_err());
    }

    #[test]
    fn env_keys() {
        let env = env_overrides(|k| (k == ENV_SEED).then(|| "9".to_string()));
        assert_eq!(env, vec![("seed".to_string(), "9".to_string())]);
    }
}
