//! Study reports: JSON with a fixed key order, and a CSV view of the
//! per-sample records.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::Result;

/// Artifact version embedded in every report: the crate version plus
/// `git describe` output when available at build time.
pub const VERSION: &str = env!("GRAVALLOC_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub study: String,
    pub version: String,
    /// The fully resolved study configuration.
    pub parameters: Value,
    pub seed: u64,
    /// One flat object per sample, trial or table row.
    pub records: Vec<Map<String, Value>>,
    pub summary: Map<String, Value>,
    pub notes: Vec<String>,
    pub status: ReportStatus,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn new(study: &str, parameters: Value, seed: u64) -> Self {
        Self {
            study: study.to_string(),
            version: VERSION.to_string(),
            parameters,
            seed,
            records: Vec::new(),
            summary: Map::new(),
            notes: Vec::new(),
            status: ReportStatus::Ok,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn push_record(&mut self, record: Value) {
        if let Value::Object(m) = record {
            self.records.push(m);
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.summary.insert(key.to_string(), v);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn fail(&mut self, reason: impl std::fmt::Display) {
        self.status = ReportStatus::Failed;
        self.notes.push(format!("study failed: {reason}"));
    }

    pub fn succeeded(&self) -> bool {
        self.status == ReportStatus::Ok
    }

    /// Numeric summary entry by key; nested keys are separated by `/`.
    pub fn summary_f64(&self, key: &str) -> Option<f64> {
        let mut parts = key.split('/');
        let mut v = self.summary.get(parts.next()?)?;
        for p in parts {
            v = v.get(p)?;
        }
        v.as_f64()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// The JSON form with the wall-clock field zeroed, for determinism
    /// comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        r.to_json()
    }

    /// Records as CSV. Columns are the union of record keys in order of
    /// first appearance; missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<&str> = Vec::new();
        for r in &self.records {
            for k in r.keys() {
                if !cols.contains(&k.as_str()) {
                    cols.push(k);
                }
            }
        }
        let mut out = cols.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for r in &self.records {
            let row: Vec<String> = cols
                .iter()
                .map(|c| match r.get(*c) {
                    None | Some(Value::Null) => String::new(),
                    Some(Value::String(s)) => csv_field(s),
                    Some(v) => csv_field(&v.to_string()),
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new("tau", json!({"n": 4}), 7);
        r.push_record(json!({"index": 0, "tau": 0.25}));
        r.push_record(json!({"index": 1, "target": "none, really", "tau": 0.5}));
        r.set("mean", 0.375);
        r.wall_clock_seconds = 1.5;
        r
    }

    #[test]
    fn json_key_order_is_fixed() {
        let s = sample().to_json().unwrap();
        let keys = ["\"study\"", "\"version\"", "\"parameters\"", "\"seed\"", "\"records\"", "\"summary\"", "\"notes\"", "\"status\"", "\"wall_clock_seconds\""];
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(s.find("\"index\"").unwrap() < s.find("\"tau\": 0.25").unwrap());
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(ExperimentReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_has_header_and_union_columns() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "index,tau,target");
        assert_eq!(lines[1], "0,0.25,");
        assert_eq!(lines[2], "1,0.5,\"none, really\"");
    }

    #[test]
    fn canonical_form_ignores_wall_clock() {
        let a = sample();
        let mut b = sample();
        b.wall_clock_seconds = 99.0;
        assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
        assert!(a.version.starts_with(env!("CARGO_PKG_VERSION")));
    }

    #[test]
    fn failure_marks_status_and_notes() {
        let mut r = sample();
        r.fail("out of budget");
        assert_eq!(r.status, ReportStatus::Failed);
        assert!(r.notes.last().unwrap().contains("out of budget"));
    }
}
