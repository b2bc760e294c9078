use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// One asserted invariant. `passed` is `value ≤ tolerance` unless the
/// check states otherwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub id: String,
    pub kind: String,
    pub seed: u64,
    pub seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    pub invariants: Vec<Verdict>,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn new(id: &str, kind: &str, seed: u64) -> Self {
        Self { id: id.into(), kind: kind.into(), seed, seconds: 0.0, metrics: BTreeMap::new(), invariants: Vec::new(), artifacts: Vec::new() }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Records `value ≤ tolerance`.
    pub fn at_most(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        let passed = value <= tolerance;
        self.verdict(name, value, tolerance, passed);
    }

    /// Records `value ≥ bound`.
    pub fn at_least(&mut self, name: impl Into<String>, value: f64, bound: f64) {
        let passed = value >= bound;
        self.verdict(name, value, bound, passed);
    }

    pub fn verdict(&mut self, name: impl Into<String>, value: f64, tolerance: f64, passed: bool) {
        let name = name.into();
        assert!(!self.invariants.iter().any(|v| v.name == name), "invariant {name} reported twice");
        self.invariants.push(Verdict { name, value, tolerance, passed });
    }

    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|v| v.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.invariants.iter().filter(|v| !v.passed)
    }

    /// `report.json` plus `metrics.csv` and `invariants.csv`; the CSVs carry
    /// no timings so repeated runs compare byte for byte.
    pub fn write(&mut self, dir: &Path) -> std::io::Result<()> {
        let mut metrics = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            writeln!(metrics, "{k},{v:.12e}").expect("writing to a String");
        }
        let mut inv = String::from("invariant,value,tolerance,verdict\n");
        for v in &self.invariants {
            writeln!(inv, "{},{:.12e},{:.6e},{}", v.name, v.value, v.tolerance, if v.passed { "pass" } else { "fail" }).expect("writing to a String");
        }
        for (name, body) in [("metrics.csv", metrics), ("invariants.csv", inv)] {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            self.artifacts.push(path);
        }
        let path = dir.join("report.json");
        self.artifacts.push(path.clone());
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json + "\n")
    }

    pub fn summary_line(&self) -> String {
        let failed = self.failures().count();
        format!(
            "[{}] {:<24} {:<17} {} invariants, {failed} failed, {:.1}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.kind,
            self.invariants.len(),
            self.seconds
        )
    }
}
