//! Run reports (JSON) and field exports (CSV).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::grid::ValueField;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub criterion: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl Verdict {
    /// Passes when `value ≤ threshold`.
    pub fn at_most(criterion: &str, value: f64, threshold: f64) -> Self {
        Self {
            criterion: criterion.to_string(),
            pass: value <= threshold,
            value: Some(value),
            threshold: Some(threshold),
            detail: String::new(),
        }
    }

    pub fn check(criterion: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            criterion: criterion.to_string(),
            pass,
            value: None,
            threshold: None,
            detail: detail.into(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub suite: String,
    pub pass: bool,
    pub outputs: BTreeMap<String, Value>,
    pub verdicts: Vec<Verdict>,
}

impl CaseReport {
    pub fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            pass: true,
            outputs: BTreeMap::new(),
            verdicts: Vec::new(),
        }
    }

    pub fn output(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.outputs.insert(key.to_string(), v);
    }

    pub fn verdict(&mut self, v: Verdict) {
        self.pass &= v.pass;
        self.verdicts.push(v);
    }
}

/// Wall-clock data; the only part of a report that varies between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub total_ms: f64,
    pub suite_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub suite: String,
    /// SHA-256 of the configuration text followed by the seed.
    pub inputs_digest: String,
    pub seed: u64,
    pub threads: usize,
    pub config: String,
    pub pass: bool,
    pub cases: Vec<CaseReport>,
    pub timing: Timing,
}

pub fn inputs_digest(config_text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update(format!("\nseed={seed}\n").as_bytes());
    hex::encode(h.finalize())
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report with the `timing` object removed.
    pub fn deterministic_part(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(map) = &mut v {
            map.remove("timing");
        }
        Ok(v)
    }

    /// 0 when every verdict passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }

    pub fn verdict_lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .flat_map(|c| {
                c.verdicts.iter().map(move |v| {
                    let status = if v.pass { "PASS" } else { "FAIL" };
                    let mut line = format!("{status} {}: {}", c.suite, v.criterion);
                    if let (Some(value), Some(threshold)) = (v.value, v.threshold) {
                        line.push_str(&format!(" ({value:.3e} vs {threshold:.3e})"));
                    }
                    if !v.detail.is_empty() {
                        line.push_str(&format!(" [{}]", v.detail));
                    }
                    line
                })
            })
            .collect()
    }
}

/// Long-format export with columns `t,x,<name>`.
pub fn write_field_csv(path: &Path, field: &ValueField, name: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", name])?;
    let grid = field.grid;
    for n in 0..=grid.nt {
        for i in 0..grid.nx {
            w.write_record([grid.t(n).to_string(), grid.x(i).to_string(), field.at(n, i).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and rows of numbers.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_seed_and_text() {
        let a = inputs_digest("terminal.g = \"x\"\n", 1);
        assert_eq!(a.len(), 64);
        assert_eq!(a, inputs_digest("terminal.g = \"x\"\n", 1));
        assert_ne!(a, inputs_digest("terminal.g = \"x\"\n", 2));
        assert_ne!(a, inputs_digest("terminal.g = \"x \"\n", 1));
    }

    #[test]
    fn case_pass_tracks_verdicts() {
        let mut c = CaseReport::new("demo");
        c.verdict(Verdict::at_most("small", 1.0, 2.0));
        assert!(c.pass);
        c.verdict(Verdict::at_most("smaller", 3.0, 2.0));
        assert!(!c.pass);
        assert!(!Verdict::at_most("nan", f64::NAN, 1.0).pass);
    }
}
