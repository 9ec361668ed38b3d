//! Machine-readable experiment records.
//!
//! Every verification emits a flat list of records with the fields
//! `{experiment, params, estimate, ci_lo, ci_hi, target, pass}`; JSON output
//! is byte-identical for identical inputs (sorted params, no clocks).

use std::io::Write;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub experiment: String,
    pub params: Map<String, Value>,
    pub estimate: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub target: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(experiment: &str, estimate: f64, target: f64, pass: bool) -> Self {
        CheckRecord {
            experiment: experiment.to_string(),
            params: Map::new(),
            estimate,
            ci_lo: None,
            ci_hi: None,
            target,
            pass,
        }
    }

    pub fn with_ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci_lo = Some(lo);
        self.ci_hi = Some(hi);
        self
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn param_f64(mut self, key: &str, value: f64) -> Self {
        self.params.insert(
            key.to_string(),
            serde_json::Number::from_f64(value)
                .map(Value::Number)
                .unwrap_or(Value::Null),
        );
        self
    }
}

pub fn write_records_json(records: &[CheckRecord], out: &mut impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, records).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

/// One-line textual summary used by the suite table.
pub fn record_line(r: &CheckRecord) -> String {
    let ci = match (r.ci_lo, r.ci_hi) {
        (Some(lo), Some(hi)) => format!(" [{lo:.6}, {hi:.6}]"),
        _ => String::new(),
    };
    format!(
        "{:<44} est {:>12.6}{ci} target {:>12.6}  {}",
        r.experiment,
        r.estimate,
        r.target,
        if r.pass { "pass" } else { "FAIL" }
    )
}
