//! Sweeps, latency tables and the area grid.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use dmac_core::metrics::{
    estimate_area, ideal_utilization, latency_probes, MetricsError, RunReport, CSV_COLUMNS,
};
use dmac_core::run::{run_scenario, RunError, Scenario};
use dmac_core::soc::DmacConfig;
use dmac_core::workload::{NextPlacement, SizeDistribution};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::ConfigError;

pub const PRESETS: [&str; 4] = ["base", "speculation", "scaled", "baseline"];
pub const LATENCIES: [u64; 3] = [1, 13, 100];

/// Powers of two from 8 B to 4 KiB.
pub fn default_sizes() -> Vec<u32> {
    (3..=12).map(|p| 1u32 << p).collect()
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cell {config} L={latency} n={size} hit={hit_rate}: {source}")]
    Cell {
        config: String,
        latency: u64,
        size: u32,
        hit_rate: f64,
        source: RunError,
    },
    #[error("{config} L={latency}: {source}")]
    Probe {
        config: String,
        latency: u64,
        source: MetricsError,
    },
    #[error("miss sweep needs a configuration with prefetch slots; `{0}` has none")]
    NoSpeculation(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub config: String,
    pub latency: u64,
    pub size: u32,
    pub hit_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub configs: Vec<String>,
    pub sizes: Vec<u32>,
    pub latencies: Vec<u64>,
    pub hit_rates: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            configs: PRESETS.iter().map(|s| s.to_string()).collect(),
            sizes: default_sizes(),
            latencies: LATENCIES.to_vec(),
            hit_rates: vec![1.0],
        }
    }
}

impl SweepSpec {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for config in &self.configs {
            for &latency in &self.latencies {
                for &size in &self.sizes {
                    for &hit_rate in &self.hit_rates {
                        out.push(Cell {
                            config: config.clone(),
                            latency,
                            size,
                            hit_rate,
                        });
                    }
                }
            }
        }
        out
    }
}

/// The scenario for one grid point. Presets replace the template's hardware;
/// any other name must match the template's own name.
pub fn cell_scenario(template: &Scenario, cell: &Cell) -> Result<Scenario, ConfigError> {
    let dmac = match DmacConfig::named(&cell.config) {
        Some(d) => d,
        None if cell.config == template.name => template.dmac.clone(),
        None => return Err(ConfigError::UnknownPreset(cell.config.clone())),
    };
    let mut sc = template.clone();
    sc.name = cell.config.clone();
    sc.dmac = dmac;
    sc.memory.one_way_latency = cell.latency;
    sc.workload.sizes = SizeDistribution::Fixed(cell.size);
    sc.workload.placement = if cell.hit_rate < 1.0 {
        NextPlacement::RandomizedNext {
            hit_rate: cell.hit_rate,
            seed: template.seed,
        }
    } else {
        NextPlacement::Sequential
    };
    crate::config::validate(&sc)?;
    Ok(sc)
}

pub fn run_cell(template: &Scenario, cell: &Cell) -> Result<RunReport, HarnessError> {
    let sc = cell_scenario(template, cell)?;
    run_scenario(&sc)
        .map(|o| o.report)
        .map_err(|source| HarnessError::Cell {
            config: cell.config.clone(),
            latency: cell.latency,
            size: cell.size,
            hit_rate: cell.hit_rate,
            source,
        })
}

fn row_order(a: &RunReport, b: &RunReport) -> Ordering {
    a.config
        .cmp(&b.config)
        .then(a.latency.cmp(&b.latency))
        .then(a.size.cmp(&b.size))
        .then(b.hit_rate.total_cmp(&a.hit_rate))
}

pub fn sort_rows(rows: &mut [RunReport]) {
    rows.sort_by(row_order);
}

/// Run every cell on `jobs` threads (0 picks the core count). Rows come back
/// sorted, so the output does not depend on scheduling.
pub fn sweep(
    template: &Scenario,
    spec: &SweepSpec,
    jobs: usize,
) -> Result<Vec<RunReport>, HarnessError> {
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let mut rows = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(template, c))
            .collect::<Result<Vec<_>, _>>()
    })?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Hit-rate sweep for one configuration at one latency.
pub fn miss_sweep(
    template: &Scenario,
    config: &str,
    latency: u64,
    sizes: &[u32],
    hit_rates: &[f64],
    jobs: usize,
) -> Result<Vec<RunReport>, HarnessError> {
    let probe = cell_scenario(
        template,
        &Cell {
            config: config.to_string(),
            latency,
            size: 64,
            hit_rate: 1.0,
        },
    )?;
    if probe.dmac.prefetch_slots() == 0 {
        return Err(HarnessError::NoSpeculation(config.to_string()));
    }
    let spec = SweepSpec {
        configs: vec![config.to_string()],
        sizes: sizes.to_vec(),
        latencies: vec![latency],
        hit_rates: hit_rates.to_vec(),
    };
    sweep(template, &spec, jobs)
}

/// Places where utilization rises as the hit rate falls, as
/// `(size, higher hit rate, lower hit rate)`.
pub fn monotonicity_violations(rows: &[RunReport]) -> Vec<(u32, f64, f64)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            let same = a.config == b.config && a.latency == b.latency && a.size == b.size;
            if same && a.hit_rate > b.hit_rate && b.utilization > a.utilization + 1e-9 {
                out.push((a.size, a.hit_rate, b.hit_rate));
            }
        }
    }
    out
}

pub fn write_csv<W: Write>(rows: &[RunReport], w: W) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    for r in rows {
        wr.write_record(r.csv_fields())?;
    }
    wr.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[RunReport]) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Fixed-width summary with the ideal bound alongside each measurement.
pub fn summary_table(rows: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>6} {:>6} {:>8} {:>8} {:>7} {:>8}",
        "config", "L", "size", "hit", "util", "ideal", "ratio", "wasted"
    );
    for r in rows {
        let ideal = ideal_utilization(r.size as u64);
        let ratio = if ideal > 0.0 {
            r.utilization / ideal
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>6} {:>6.2} {:>8.4} {:>8.4} {:>7.4} {:>8}",
            r.config, r.latency, r.size, r.hit_rate, r.utilization, ideal, ratio, r.wasted_beats
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyRow {
    pub config: String,
    pub i_rf: u64,
    /// `(L, rf_rb)` per probed latency.
    pub rf_rb: Vec<(u64, u64)>,
    pub r_w: u64,
}

/// Probe a configuration with a short chain at each latency.
pub fn latency_row(config: &str, latencies: &[u64]) -> Result<LatencyRow, HarnessError> {
    let mut row = LatencyRow {
        config: config.to_string(),
        i_rf: 0,
        rf_rb: Vec::new(),
        r_w: 0,
    };
    for &l in latencies {
        let mut sc = crate::config::preset(config, l, 64)?;
        sc.workload.transfer_count = 4;
        let report = run_scenario(&sc)
            .map_err(|source| HarnessError::Cell {
                config: config.to_string(),
                latency: l,
                size: 64,
                hit_rate: 1.0,
                source,
            })?
            .report;
        let probes = dmac_core::soc::LatencyProbes {
            i_rf: report.i_rf,
            rf_rb: report.rf_rb,
            r_w: report.r_w,
        };
        let (i_rf, rf_rb, r_w) = latency_probes(&probes).map_err(|source| HarnessError::Probe {
            config: config.to_string(),
            latency: l,
            source,
        })?;
        row.i_rf = i_rf;
        row.r_w = r_w;
        row.rf_rb.push((l, rf_rb));
    }
    Ok(row)
}

pub fn latency_table(rows: &[LatencyRow]) -> String {
    let mut out = String::new();
    let mut head = format!("{:<12} {:>5}", "config", "i-rf");
    if let Some(first) = rows.first() {
        for (l, _) in &first.rf_rb {
            let _ = write!(head, " {:>10}", format!("rf-rb L={l}"));
        }
    }
    let _ = writeln!(out, "{head} {:>5}", "r-w");
    for r in rows {
        let mut line = format!("{:<12} {:>5}", r.config, r.i_rf);
        for (_, v) in &r.rf_rb {
            let _ = write!(line, " {v:>10}");
        }
        let _ = writeln!(out, "{line} {:>5}", r.r_w);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AreaRow {
    pub d: u32,
    pub s: u32,
    pub kge: f64,
    /// Preset with these parameters, if any.
    pub preset: Option<&'static str>,
}

pub fn area_grid(d_values: &[u32], s_values: &[u32]) -> Vec<AreaRow> {
    let presets: Vec<(&'static str, u32, u32)> = ["base", "speculation", "scaled"]
        .into_iter()
        .map(|n| {
            let c = DmacConfig::named(n).unwrap();
            (
                n,
                c.descriptors_in_flight() as u32,
                c.prefetch_slots() as u32,
            )
        })
        .collect();
    let mut out = Vec::new();
    for &d in d_values {
        for &s in s_values {
            out.push(AreaRow {
                d,
                s,
                kge: estimate_area(d, s),
                preset: presets.iter().find(|p| p.1 == d && p.2 == s).map(|p| p.0),
            });
        }
    }
    out
}

pub fn area_table(rows: &[AreaRow]) -> String {
    let mut out = format!("{:>4} {:>4} {:>9}  preset\n", "d", "s", "kGE");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>9.2}  {}",
            r.d,
            r.s,
            r.kge,
            r.preset.unwrap_or("")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_template() -> Scenario {
        let mut t = crate::config::preset("base", 1, 64).unwrap();
        t.workload.transfer_count = 48;
        t
    }

    #[test]
    fn grid_enumerates_every_cell() {
        let spec = SweepSpec {
            configs: vec!["base".into(), "baseline".into()],
            sizes: vec![8, 64],
            latencies: vec![1, 13, 100],
            hit_rates: vec![1.0, 0.5],
        };
        assert_eq!(spec.cells().len(), 24);
        assert_eq!(default_sizes().first(), Some(&8));
        assert_eq!(default_sizes().last(), Some(&4096));
    }

    #[test]
    fn unknown_config_is_rejected() {
        let cell = Cell {
            config: "turbo".into(),
            latency: 1,
            size: 64,
            hit_rate: 1.0,
        };
        assert!(matches!(
            cell_scenario(&small_template(), &cell),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn rows_sorted_independent_of_threads() {
        let spec = SweepSpec {
            configs: vec!["speculation".into(), "base".into()],
            sizes: vec![64, 16],
            latencies: vec![13, 1],
            hit_rates: vec![1.0],
        };
        let a = csv_string(&sweep(&small_template(), &spec, 1).unwrap()).unwrap();
        let b = csv_string(&sweep(&small_template(), &spec, 4).unwrap()).unwrap();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 9);
        assert!(lines[0].starts_with("config,latency,size,hit_rate,utilization"));
        assert!(lines[1].starts_with("base,1,16,"));
        assert!(lines[8].starts_with("speculation,13,64,"));
    }

    #[test]
    fn miss_sweep_needs_slots() {
        assert!(matches!(
            miss_sweep(&small_template(), "base", 13, &[64], &[0.5], 1),
            Err(HarnessError::NoSpeculation(_))
        ));
    }

    #[test]
    fn monotonicity_detection() {
        let row = |h: f64, u: f64| RunReport {
            config: "speculation".into(),
            size: 64,
            hit_rate: h,
            utilization: u,
            ..Default::default()
        };
        assert!(monotonicity_violations(&[row(1.0, 0.6), row(0.5, 0.5)]).is_empty());
        assert_eq!(
            monotonicity_violations(&[row(1.0, 0.5), row(0.5, 0.6)]),
            vec![(64, 1.0, 0.5)]
        );
    }

    #[test]
    fn area_grid_marks_presets() {
        let rows = area_grid(&[4, 24], &[0, 4, 24]);
        let marked: Vec<_> = rows
            .iter()
            .filter_map(|r| r.preset.map(|p| (p, r.kge)))
            .collect();
        assert_eq!(
            marked,
            vec![("base", 41.42), ("speculation", 49.18), ("scaled", 193.58)]
        );
        assert!(area_table(&rows).contains("193.58  scaled"));
    }

    #[test]
    fn latency_rows_for_main_and_baseline() {
        let main = latency_row("scaled", &[1, 13, 100]).unwrap();
        assert_eq!((main.i_rf, main.r_w), (3, 1));
        assert_eq!(main.rf_rb, vec![(1, 8), (13, 32), (100, 206)]);
        let base = latency_row("baseline", &[1]).unwrap();
        assert_eq!((base.i_rf, base.rf_rb[0].1), (10, 22));
        let table = latency_table(&[main, base]);
        assert!(table.contains("rf-rb L=13"));
    }
}
