// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-step unlearning telemetry and its CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_COLUMNS: [&str; 9] = ["step", "L_F", "L_R", "L", "A_f", "A_r", "cos_psi", "conflict_flag", "wall_ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l_f: f64,
    pub l_r: f64,
    pub l: f64,
    pub a_f: Option<f64>,
    pub a_r: Option<f64>,
    /// Shared-group cosine of the gradients the step applied: after
    /// projection for CURE, raw for the baselines. Missing when the shared
    /// group is empty or a gradient vanishes.
    pub cos_psi: Option<f64>,
    pub conflict: bool,
    pub wall_ms: f64,
    /// Shared-group cosine before projection. Not written to CSV.
    pub cos_psi_raw: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    #[serde(rename = "L_F")]
    l_f: f64,
    #[serde(rename = "L_R")]
    l_r: f64,
    #[serde(rename = "L")]
    l: f64,
    #[serde(rename = "A_f")]
    a_f: Option<f64>,
    #[serde(rename = "A_r")]
    a_r: Option<f64>,
    cos_psi: Option<f64>,
    conflict_flag: u8,
    wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentTrace {
    pub rows: Vec<TraceRow>,
}

impl AlignmentTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fraction of steps flagged as conflicting (0 for an empty trace).
    pub fn conflict_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.conflict).count() as f64 / self.rows.len() as f64
    }

    /// Same, but on the pre-projection cosine.
    pub fn raw_conflict_rate(&self, threshold: f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.cos_psi_raw.is_some_and(|c| c < threshold)).count() as f64 / self.rows.len() as f64
    }

    /// One row per step; wall time is the only column that differs between
    /// identical runs.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                step: r.step,
                l_f: r.l_f,
                l_r: r.l_r,
                l: r.l,
                a_f: r.a_f,
                a_r: r.a_r,
                cos_psi: r.cos_psi,
                conflict_flag: r.conflict as u8,
                wall_ms: r.wall_ms,
            })
            .map_err(csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != TRACE_COLUMNS {
            return Err(Error::Parse { line: 1, message: format!("unexpected trace columns {header:?}") });
        }
        let mut rows = Vec::new();
        for rec in r.deserialize::<CsvRow>() {
            let c = rec.map_err(csv_err)?;
            rows.push(TraceRow {
                step: c.step,
                l_f: c.l_f,
                l_r: c.l_r,
                l: c.l,
                a_f: c.a_f,
                a_r: c.a_r,
                cos_psi: c.cos_psi,
                conflict: c.conflict_flag != 0,
                wall_ms: c.wall_ms,
                cos_psi_raw: None,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, cos: Option<f64>) -> TraceRow {
        TraceRow {
            step,
            l_f: -0.5,
            l_r: 0.25,
            l: -0.05,
            a_f: Some(0.4),
            a_r: None,
            cos_psi: cos,
            conflict: cos.is_some_and(|c| c < -0.02),
            wall_ms: 1.5,
            cos_psi_raw: None,
        }
    }

    #[test]
    fn csv_header_and_missing_cells() {
        let t = AlignmentTrace { rows: vec![row(0, Some(-0.5)), row(1, None)] };
        let text = t.to_csv().unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_COLUMNS.join(","));
        assert_eq!(text.lines().nth(2).unwrap(), "1,-0.5,0.25,-0.05,0.4,,,0,1.5");
        assert_eq!(AlignmentTrace::from_csv(&text).unwrap(), t);
        assert_eq!(t.conflict_rate(), 0.5);
    }

    #[test]
    fn empty_trace_keeps_header() {
        let text = AlignmentTrace::default().to_csv().unwrap();
        assert_eq!(text.trim(), TRACE_COLUMNS.join(","));
        assert!(AlignmentTrace::from_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn rejects_other_columns() {
        assert!(AlignmentTrace::from_csv("step,loss\n0,1\n").is_err());
    }
}
