//! Run reports, steady-state utilization, the ideal-utilization bound,
//! latency probes and the area cost model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::descriptor::DESCRIPTOR_BYTES;
use crate::sim::SimTime;
use crate::soc::LatencyProbes;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("measurement window {warmup}+{measured} does not fit in {available} transfers")]
    WindowOutsideRun {
        warmup: usize,
        measured: usize,
        available: usize,
    },
    #[error("transfer {0} moved no payload")]
    EmptyTransfer(u64),
    #[error("latency probe {0} never fired")]
    ProbeMissing(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementWindow {
    pub warmup_transfers: usize,
    pub measured_transfers: usize,
    /// Transfers after the window, so the chain end does not thin out
    /// descriptor traffic inside it.
    pub cooldown_transfers: usize,
}

impl Default for MeasurementWindow {
    fn default() -> Self {
        MeasurementWindow {
            warmup_transfers: 16,
            measured_transfers: 256,
            cooldown_transfers: 32,
        }
    }
}

impl MeasurementWindow {
    pub fn required_transfers(&self) -> usize {
        self.warmup_transfers + self.measured_transfers + self.cooldown_transfers
    }
}

/// Payload share of the read stream when every transfer also costs one
/// descriptor fetch.
pub fn ideal_utilization(n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    n as f64 / (n + DESCRIPTOR_BYTES as u64) as f64
}

/// Area in kGE for `d` descriptors in flight and `s` prefetch slots.
pub fn estimate_area(d: u32, s: u32) -> f64 {
    // computed in hundredths so table values come out exact
    (2030 + 528 * d as u64 + 194 * s as u64) as f64 / 100.0
}

/// Window bounds and the payload beats inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub first: SimTime,
    pub last: SimTime,
    pub beats: u64,
    pub utilization: f64,
}

/// Payload read beats per cycle between the first payload beat of transfer
/// `warmup` and the last payload beat of the final measured transfer.
pub fn measure_utilization(
    backend: &Backend,
    window: &MeasurementWindow,
    transfers: usize,
) -> Result<Measurement, MetricsError> {
    if window.measured_transfers == 0 || window.required_transfers() > transfers {
        return Err(MetricsError::WindowOutsideRun {
            warmup: window.warmup_transfers,
            measured: window.measured_transfers,
            available: transfers,
        });
    }
    let first_seq = window.warmup_transfers as u64;
    let last_seq = (window.warmup_transfers + window.measured_transfers - 1) as u64;
    let first = backend
        .payload_span(first_seq)
        .ok_or(MetricsError::EmptyTransfer(first_seq))?
        .first;
    let last = backend
        .payload_span(last_seq)
        .ok_or(MetricsError::EmptyTransfer(last_seq))?
        .last;
    Ok(measure_beats(backend.payload_read_beats(), first, last))
}

/// Utilization of a sorted beat trace over `[first, last]`.
pub fn measure_beats(beats: &[SimTime], first: SimTime, last: SimTime) -> Measurement {
    let lo = beats.partition_point(|&t| t < first);
    let hi = beats.partition_point(|&t| t <= last);
    let count = hi.saturating_sub(lo) as u64;
    let cycles = last.0 - first.0 + 1;
    Measurement {
        first,
        last,
        beats: count,
        utilization: count as f64 / cycles as f64,
    }
}

/// All three probes, or the first that is missing.
pub fn latency_probes(p: &LatencyProbes) -> Result<(u64, u64, u64), MetricsError> {
    Ok((
        p.i_rf.ok_or(MetricsError::ProbeMissing("i_rf"))?,
        p.rf_rb.ok_or(MetricsError::ProbeMissing("rf_rb"))?,
        p.r_w.ok_or(MetricsError::ProbeMissing("r_w"))?,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub latency: u64,
    pub size: u32,
    pub hit_rate: f64,
    pub utilization: f64,
    pub i_rf: Option<u64>,
    pub rf_rb: Option<u64>,
    pub r_w: Option<u64>,
    pub payload_beats: u64,
    pub descriptor_beats: u64,
    pub wasted_beats: u64,
    pub writeback_beats: u64,
    pub hits: u64,
    pub misses: u64,
    pub total_cycles: u64,
    pub transfers: u64,
    pub irqs: u64,
    pub discarded_fetches: u64,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "config",
    "latency",
    "size",
    "hit_rate",
    "utilization",
    "i_rf",
    "rf_rb",
    "r_w",
    "payload_beats",
    "descriptor_beats",
    "wasted_beats",
    "writeback_beats",
    "hits",
    "misses",
    "total_cycles",
];

fn opt(v: Option<u64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl RunReport {
    pub fn total_beats(&self) -> u64 {
        self.payload_beats + self.descriptor_beats + self.wasted_beats + self.writeback_beats
    }

    /// Values in [`CSV_COLUMNS`] order.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.config.clone(),
            self.latency.to_string(),
            self.size.to_string(),
            format!("{:.6}", self.hit_rate),
            format!("{:.6}", self.utilization),
            opt(self.i_rf),
            opt(self.rf_rb),
            opt(self.r_w),
            self.payload_beats.to_string(),
            self.descriptor_beats.to_string(),
            self.wasted_beats.to_string(),
            self.writeback_beats.to_string(),
            self.hits.to_string(),
            self.misses.to_string(),
            self.total_cycles.to_string(),
        ]
    }

    /// One `key = value` line per field.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in CSV_COLUMNS.iter().zip(self.csv_fields()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "transfers = {}", self.transfers);
        let _ = writeln!(out, "irqs = {}", self.irqs);
        let _ = writeln!(out, "discarded_fetches = {}", self.discarded_fetches);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_law() {
        assert!((ideal_utilization(64) - 0.6667).abs() < 1e-4);
        assert_eq!(ideal_utilization(0), 0.0);
        assert!((ideal_utilization(256) - 0.8889).abs() < 1e-4);
    }

    #[test]
    fn area_table_values() {
        assert_eq!(estimate_area(4, 0), 41.42);
        assert_eq!(estimate_area(4, 4), 49.18);
        assert_eq!(estimate_area(24, 24), 193.58);
    }

    #[test]
    fn area_is_affine() {
        for d in 2..=32 {
            for s in 0..=32 {
                let step = estimate_area(d, s) - estimate_area(d - 1, s);
                assert!((step - 5.28).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beat_window_clipping() {
        let beats: Vec<SimTime> = [1, 2, 3, 5, 6, 9].into_iter().map(SimTime).collect();
        let m = measure_beats(&beats, SimTime(2), SimTime(6));
        assert_eq!(m.beats, 4);
        assert!((m.utilization - 0.8).abs() < 1e-12);
    }

    #[test]
    fn csv_row_shape() {
        let r = RunReport {
            config: "base".into(),
            latency: 13,
            size: 64,
            hit_rate: 1.0,
            utilization: 2.0 / 3.0,
            i_rf: Some(3),
            ..Default::default()
        };
        let f = r.csv_fields();
        assert_eq!(f.len(), CSV_COLUMNS.len());
        assert_eq!(f[4], "0.666667");
        assert_eq!(f[6], "");
        assert!(r.to_kv().starts_with("config = base\nlatency = 13\n"));
    }

    #[test]
    fn missing_probe_named() {
        let p = LatencyProbes {
            i_rf: Some(3),
            rf_rb: None,
            r_w: Some(1),
        };
        assert_eq!(latency_probes(&p), Err(MetricsError::ProbeMissing("rf_rb")));
    }
}
