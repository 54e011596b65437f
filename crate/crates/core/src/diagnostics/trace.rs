use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One diagnostic snapshot of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub generation: u64,
    pub time: f64,
    /// Trace of the ensemble covariance (population normalization).
    pub variance: f64,
    /// `W_2` to the reference point, when the problem has one.
    pub w2_dirac: Option<f64>,
    /// Mean of `|A(x)|^2` over the ensemble.
    pub constraint_energy: f64,
    /// Weighted mean for CBO, ensemble mean for EKI.
    pub reported_point: Vec<f64>,
    pub ensemble_mean: Vec<f64>,
    /// Spectral norm of the sample covariance (EKI only).
    pub cov_norm: Option<f64>,
    /// L1 distance of the reported point to the known truth, when available.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub problem: String,
    pub seed: u64,
    pub run: u32,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub meta: TraceMeta,
    pub records: Vec<Record>,
    /// Error message of the step that terminated the run early.
    pub failure: Option<String>,
    /// Set when the run stopped because the ensemble collapsed or stagnated.
    pub stopped_early: bool,
}

impl RunTrace {
    pub fn new(meta: TraceMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
            failure: None,
            stopped_early: false,
        }
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub(crate) fn push(&mut self, record: Record) {
        debug_assert!(self.records.last().is_none_or(|r| r.generation < record.generation));
        self.records.push(record);
    }

    /// Record at the latest generation not after `generation`.
    pub fn at_generation(&self, generation: u64) -> Option<&Record> {
        self.records.iter().take_while(|r| r.generation <= generation).last()
    }

    /// Writes `generation,time,variance,w2_dirac,constraint_energy,reported_point_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.records.first().map_or(0, |r| r.reported_point.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["generation", "time", "variance", "w2_dirac", "constraint_energy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..dim).map(|i| format!("reported_point_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.generation.to_string(),
                format_float(r.time),
                format_float(r.variance),
                r.w2_dirac.map(format_float).unwrap_or_default(),
                format_float(r.constraint_energy),
            ];
            row.extend(r.reported_point.iter().map(|v| format_float(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e.to_string()))
}

/// Shortest round-trip decimal, scientific outside `[1e-4, 1e7)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e7).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// First generation whose variance is below `tol`.
pub fn detect_collapse(trace: &RunTrace, tol: f64) -> Option<u64> {
    first_below(trace.records.iter().map(|r| (r.generation, r.variance)), tol)
}

/// First generation of a `(generation, value)` series with value below `tol`.
pub fn first_below(series: impl IntoIterator<Item = (u64, f64)>, tol: f64) -> Option<u64> {
    series.into_iter().find(|(_, v)| *v < tol).map(|(g, _)| g)
}
