//! Power and mean energy-versus-performance (mEPT) from measured traces,
//! plus an analytical compute/traffic cost model.
//!
//! `Power = Σᵢ (εᵢ(model) − εᵢ(empty)) / T`, `mEPT = mean(P) / Power`.

pub mod cost;

use std::fmt;
use std::path::Path;

use crate::error::{FemtoError, Result};

pub use cost::{estimate_cost, neck_cost, CostReport, LayerCost, NeckKind};
pub use crate::net::config::make_empty_config;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLabel {
    Model,
    Empty,
}

/// Per-image energy samples (joules) and the wall time they span.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    pub energies: Vec<f64>,
    pub total_time: f64,
    pub label: TraceLabel,
}

impl EnergyTrace {
    pub fn new(energies: Vec<f64>, total_time: f64, label: TraceLabel) -> Result<Self> {
        let t = Self {
            energies,
            total_time,
            label,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies.is_empty() {
            return Err(FemtoError::InvalidArgument("trace has no samples".into()));
        }
        if !(self.total_time > 0.0) || !self.total_time.is_finite() {
            return Err(FemtoError::InvalidArgument(format!(
                "total time must be positive, got {}",
                self.total_time
            )));
        }
        if let Some((i, e)) = self.energies.iter().enumerate().find(|(_, e)| !(**e >= 0.0) || !e.is_finite()) {
            return Err(FemtoError::InvalidArgument(format!("sample {i} has energy {e}")));
        }
        Ok(())
    }

    /// `index,energy_joules` rows (1-based), then `total_time_seconds,<T>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,energy_joules\n");
        for (i, e) in self.energies.iter().enumerate() {
            s.push_str(&format!("{},{e}\n", i + 1));
        }
        s.push_str(&format!("total_time_seconds,{}\n", self.total_time));
        s
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> FemtoError {
    FemtoError::Parse { line, msg: msg.into() }
}

/// Parses the trace CSV. Indices must increase strictly; the footer row is
/// required and must come last.
pub fn parse_trace(text: &str, label: TraceLabel) -> Result<EnergyTrace> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h.trim() == "index,energy_joules" => {}
        Some((n, h)) => return Err(parse_err(n, format!("expected header `index,energy_joules`, got `{h}`"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut energies = Vec::new();
    let mut last_index: Option<u64> = None;
    let mut total_time = None;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if total_time.is_some() {
            return Err(parse_err(n, "rows after the total_time_seconds footer"));
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| parse_err(n, format!("expected two comma-separated fields, got `{line}`")))?;
        let value: f64 = b
            .trim()
            .parse()
            .map_err(|_| parse_err(n, format!("`{}` is not a number", b.trim())))?;
        if a.trim() == "total_time_seconds" {
            if !(value > 0.0) {
                return Err(parse_err(n, format!("total_time_seconds must be positive, got {value}")));
            }
            total_time = Some(value);
            continue;
        }
        let idx: u64 = a
            .trim()
            .parse()
            .map_err(|_| parse_err(n, format!("`{}` is not an index", a.trim())))?;
        if let Some(prev) = last_index {
            if idx == prev {
                return Err(parse_err(n, format!("duplicate index {idx}")));
            }
            if idx < prev {
                return Err(parse_err(n, format!("index {idx} after {prev} is not increasing")));
            }
        }
        if !(value >= 0.0) || !value.is_finite() {
            return Err(parse_err(n, format!("negative or non-finite energy {value}")));
        }
        last_index = Some(idx);
        energies.push(value);
    }
    if energies.is_empty() {
        return Err(FemtoError::InvalidArgument("no samples".into()));
    }
    let total_time = total_time.ok_or_else(|| parse_err(text.lines().count(), "missing total_time_seconds footer"))?;
    EnergyTrace::new(energies, total_time, label)
}

pub fn ingest_trace(path: &Path, label: TraceLabel) -> Result<EnergyTrace> {
    parse_trace(&std::fs::read_to_string(path)?, label)
}

/// Watts attributable to the model over the empty baseline; the model
/// trace's time is used. A negative result is an error.
pub fn compute_power(model: &EnergyTrace, empty: &EnergyTrace) -> Result<f64> {
    model.validate()?;
    empty.validate()?;
    if model.energies.len() != empty.energies.len() {
        return Err(FemtoError::InvalidArgument(format!(
            "traces differ in length: {} vs {}",
            model.energies.len(),
            empty.energies.len()
        )));
    }
    let diff: f64 = model.energies.iter().zip(&empty.energies).map(|(a, b)| a - b).sum();
    let p = diff / model.total_time;
    if p < 0.0 {
        return Err(FemtoError::NegativePower(p));
    }
    Ok(p)
}

/// Per-image performance values, or one dataset-level value.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfSeries(pub Vec<f64>);

impl PerfSeries {
    pub fn scalar(p: f64) -> Self {
        Self(vec![p])
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EptReport {
    pub power_watts: f64,
    pub mean_perf: f64,
    pub mept: f64,
}

/// Half-away-from-zero rounding to two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl EptReport {
    pub fn mept_rounded(&self) -> f64 {
        round2(self.mept)
    }
}

impl fmt::Display for EptReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Rounded values print without trailing zeros: `power_watts=0`.
        writeln!(f, "power_watts={}", round2(self.power_watts))?;
        writeln!(f, "mean_perf={}", round2(self.mean_perf))?;
        write!(f, "mept={}", self.mept_rounded())
    }
}

pub fn compute_mept(perf: &PerfSeries, power_watts: f64) -> Result<EptReport> {
    if !(power_watts > 0.0) || !power_watts.is_finite() {
        return Err(FemtoError::InvalidArgument(format!(
            "mEPT needs positive power, got {power_watts}"
        )));
    }
    let mean_perf = perf.mean();
    Ok(EptReport {
        power_watts,
        mean_perf,
        mept: mean_perf / power_watts,
    })
}
