//! The one configuration schema behind every command.
//!
//! A config file is TOML with a `[train]` and a `[benchmark]` table; every
//! key is optional. Values are resolved last-wins: defaults, then the file,
//! then `MMFEAT_SET`, then `--set` and the dedicated flags.

use std::path::Path;

use mmfeat::benchmark::BenchmarkConfig;
use mmfeat::training::{apply_overrides, TrainConfig};
use mmfeat::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable holding `;`-separated `key=value` overrides.
pub const ENV_SET: &str = "MMFEAT_SET";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` strings in order.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let pairs = overrides
            .iter()
            .map(|s| s.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| Error::Config(format!("override `{s}` is not key=value"))))
            .collect::<Result<Vec<_>>>()?;
        apply_overrides(self, pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.benchmark.validate()
    }
}

/// Overrides from [`ENV_SET`], if set.
pub fn env_overrides() -> Vec<String> {
    std::env::var(ENV_SET)
        .map(|v| v.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default()
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every settable key with its default, in schema order.
pub fn schema_defaults() -> Vec<(String, String)> {
    let mut out = Vec::new();
    flatten("", &toml::Value::try_from(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

/// Default of one dotted key, as TOML text.
pub fn default_of(key: &str) -> String {
    schema_defaults().into_iter().find(|(k, _)| k == key).map(|(_, v)| v).unwrap_or_else(|| panic!("`{key}` is not a configuration key"))
}

/// Help text listing every key for `--set`.
pub fn keys_help() -> String {
    let rows = schema_defaults();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys for --set and the config file (defaults):\n");
    for (k, v) in rows {
        out += &format!("  {k:width$}  {v}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_lists_nested_keys() {
        let keys: Vec<String> = schema_defaults().into_iter().map(|(k, _)| k).collect();
        for k in ["train.iterations", "train.loss.lambda", "benchmark.k", "benchmark.ransac.iterations"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
        assert_eq!(default_of("benchmark.k"), "1024");
        assert_eq!(default_of("train.iterations"), "10000");
    }

    #[test]
    fn overrides_are_last_wins() {
        let c = RunConfig::default().with_overrides(&["benchmark.k=10".into(), "benchmark.k=20".into(), "train.objective=naive-coupled".into()]).unwrap();
        assert_eq!(c.benchmark.k, 20);
        assert_eq!(c.train.objective, mmfeat::losses::Objective::NaiveCoupled);
        assert!(RunConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["k".into()]).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&c.to_toml()).unwrap(), c);
        assert_eq!(toml::from_str::<RunConfig>("").unwrap(), c);
    }
}
