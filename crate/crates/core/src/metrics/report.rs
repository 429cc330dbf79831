//! Metrics files: `key value` lines plus a JSON summary with the same content.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    pub labels: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn set(&mut self, key: &str, v: f64) -> &mut Self {
        self.values.insert(key.to_string(), v);
        self
    }

    pub fn label(&mut self, key: &str, v: impl Into<String>) -> &mut Self {
        self.labels.insert(key.to_string(), v.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// `{:.17e}` keeps every value exactly recoverable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.labels {
            out.push_str(&format!("{k} {v}\n"));
        }
        for (k, v) in &self.values {
            out.push_str(&format!("{k} {v:.17e}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.labels {
            map.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        for (k, v) in &self.values {
            map.insert(k.clone(), serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, serde_json::Value::Number));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("plain map serializes")
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json() + "\n")?;
        Ok(())
    }
}
