//! Plain key=value run configuration: a config file seeds the values and
//! command-line flags override them. Unknown keys are rejected and the
//! merged result is echoed into the output directory for provenance.

use std::collections::BTreeMap;
use std::path::Path;

pub const KNOWN_KEYS: &[&str] = &[
    "arch",
    "scheme",
    "horizon",
    "loss",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "runs",
    "eval_sequences",
    "clip_grad",
    "dataset",
    "out_dir",
    "train_frac",
    "train_until",
    "parallel",
    "smooth_window",
];

#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {} is not key=value: '{raw}'", i + 1))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(format!("config line {}: unknown key '{key}'", i + 1));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag values take precedence over file values.
    pub fn set(&mut self, key: &str, value: Option<String>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key {key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v);
        }
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| format!("config key '{key}': {e}")),
        }
    }

    /// Echo every effective value, one per line, sorted by key.
    pub fn write_echo(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(path, out)
    }
}
