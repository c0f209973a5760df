//! Per-sample residual reports shared by every check.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tolerances::MAX_OFFENDERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub point: Vec<f64>,
    /// `None` when the sample could not be evaluated.
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleRecord {
    fn effective(&self) -> f64 {
        self.residual.unwrap_or(f64::INFINITY)
    }
}

/// Outcome of evaluating one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub residual: f64,
    pub value: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(residual: f64) -> Self {
        Sample {
            residual,
            value: None,
        }
    }

    pub fn with_value(residual: f64, value: Vec<f64>) -> Self {
        Sample {
            residual,
            value: Some(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheck {
    pub name: String,
    pub verdict: Verdict,
    pub max: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub system: String,
    pub tolerance: f64,
    pub samples: Vec<SampleRecord>,
    /// Errored samples count as an infinite residual.
    pub max: f64,
    pub mean: f64,
    pub verdict: Verdict,
    pub offending: Vec<SampleRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub citation: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cross_checks: Vec<CrossCheck>,
}

/// Evaluates `f` at every point in parallel, keeping sample order.
pub fn evaluate_samples<F>(points: &[Vec<f64>], f: F) -> Vec<SampleRecord>
where
    F: Fn(&[f64]) -> Result<Sample> + Sync,
{
    points
        .par_iter()
        .map(|p| match f(p) {
            Ok(s) => SampleRecord {
                point: p.clone(),
                residual: Some(s.residual),
                value: s.value,
                error: None,
            },
            Err(e) => SampleRecord {
                point: p.clone(),
                residual: None,
                value: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

impl CheckReport {
    pub fn new(check: &str, system: &str, tolerance: f64, samples: Vec<SampleRecord>) -> Self {
        let mut r = CheckReport {
            check: check.to_string(),
            system: system.to_string(),
            tolerance,
            samples,
            max: 0.0,
            mean: 0.0,
            verdict: Verdict::Pass,
            offending: Vec::new(),
            classification: None,
            citation: None,
            notes: Vec::new(),
            metrics: BTreeMap::new(),
            cross_checks: Vec::new(),
        };
        r.recompute();
        r
    }

    /// Refreshes the aggregates after `samples` or `tolerance` changed.
    pub fn recompute(&mut self) {
        let n = self.samples.len();
        self.max = self
            .samples
            .iter()
            .map(SampleRecord::effective)
            .fold(0.0, f64::max);
        self.mean = if n == 0 {
            0.0
        } else {
            self.samples
                .iter()
                .map(SampleRecord::effective)
                .sum::<f64>()
                / n as f64
        };
        self.verdict = Verdict::from_bool(self.max <= self.tolerance);
        self.offending = self
            .samples
            .iter()
            .filter(|s| !(s.effective() <= self.tolerance))
            .take(MAX_OFFENDERS)
            .cloned()
            .collect();
    }

    pub fn passed(&self) -> bool {
        self.verdict.passed()
    }

    pub fn error_count(&self) -> usize {
        self.samples.iter().filter(|s| s.error.is_some()).count()
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    /// Records a companion check; `expected_same` says whether its verdict
    /// should coincide with this report's.
    pub fn cross_check(&mut self, other: &CheckReport, expected_same: bool) {
        let agrees = (other.verdict == self.verdict) == expected_same;
        self.cross_checks.push(CrossCheck {
            name: other.check.clone(),
            verdict: other.verdict,
            max: other.max,
            agrees,
        });
    }

    pub fn cross_checks_agree(&self) -> bool {
        self.cross_checks.iter().all(|c| c.agrees)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// One row per sample: index, coordinates, residual, error.
    pub fn to_csv(&self) -> Result<String> {
        let dim = self.samples.first().map_or(0, |s| s.point.len());
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["check".to_string(), "index".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        header.extend(["residual".to_string(), "error".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut row = vec![self.check.clone(), i.to_string()];
            row.extend(s.point.iter().map(|v| v.to_string()));
            row.push(s.residual.map_or(String::new(), |r| r.to_string()));
            row.push(s.error.clone().unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} [{}]: {} (max {:.3e}, mean {:.3e}, tol {:.1e}, {} samples)",
            self.check,
            self.system,
            self.verdict,
            self.max,
            self.mean,
            self.tolerance,
            self.samples.len()
        )?;
        if let Some(c) = &self.classification {
            writeln!(f, "  classification: {c}")?;
        }
        if let Some(c) = &self.citation {
            writeln!(f, "  claim: {c}")?;
        }
        for (k, v) in &self.metrics {
            writeln!(f, "  {k} = {v:.6e}")?;
        }
        for c in &self.cross_checks {
            writeln!(
                f,
                "  cross-check {}: {} (max {:.3e}){}",
                c.name,
                c.verdict,
                c.max,
                if c.agrees { "" } else { "  DISAGREES" }
            )?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        for s in &self.offending {
            match (&s.error, s.residual) {
                (Some(e), _) => writeln!(f, "  at {:?}: error: {e}", s.point)?,
                (None, Some(r)) => writeln!(f, "  at {:?}: residual {r:.3e}", s.point)?,
                (None, None) => {}
            }
        }
        Ok(())
    }
}
