use std::fmt::Display;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::mc::OrderFit;

/// One pass/fail line of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            pass: value <= bound,
            value,
            threshold: format!("<= {}", compact(bound)),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            pass: value >= bound,
            value,
            threshold: format!(">= {}", compact(bound)),
        }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            pass: (lo..=hi).contains(&value),
            value,
            threshold: format!("in [{}, {}]", compact(lo), compact(hi)),
        }
    }

    /// Slope check on an optional fit; a missing fit fails with a NaN value.
    pub fn slope_at_least(name: impl Into<String>, fit: &Option<OrderFit>, bound: f64) -> Self {
        Self::at_least(name, fit.as_ref().map_or(f64::NAN, |f| f.slope), bound)
    }

    pub fn slope_at_most(name: impl Into<String>, fit: &Option<OrderFit>, bound: f64) -> Self {
        Self::at_most(name, fit.as_ref().map_or(f64::NAN, |f| f.slope), bound)
    }

    pub fn flag(name: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            pass,
            value: if pass { 1.0 } else { 0.0 },
            threshold: "== 1".into(),
        }
    }
}

/// Shortest round-trip form, in exponent notation for very small or large
/// magnitudes.
pub fn compact(x: f64) -> String {
    if x != 0.0 && x.is_finite() && !(1e-3..1e6).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

#[derive(Serialize)]
struct Header<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    header: Header<'a>,
    config: &'a C,
    results: &'a R,
    checks: &'a [Check],
    pass: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_report<C: Serialize, R: Serialize>(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: &C,
    results: &R,
    checks: &[Check],
) -> Result<()> {
    let header = Header {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(serde_json::to_string(config)?.as_bytes()),
        seed,
    };
    let report = Report {
        header,
        config,
        results,
        checks,
        pass: checks.iter().all(|c| c.pass),
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

/// Comma-separated table built row by row.
pub(crate) struct Table {
    text: String,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { text: columns.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fs::write(dir.join(name), &self.text)?;
        Ok(())
    }
}

/// Appends `(label, quantity, slope, slope_se, r2)`, blank for a missing fit.
pub(crate) fn fit_row(t: &mut Table, label: &str, quantity: &str, fit: &Option<OrderFit>) {
    match fit {
        Some(f) => t.row(&[&label, &quantity, &f.slope, &f.slope_se, &f.r2]),
        None => t.row(&[&label, &quantity, &"", &"", &""]),
    }
}
