use std::path::Path;
use std::process::{Command, Output};

use dmac_core::mem::MemoryConfig;
use dmac_core::metrics::{latency_probes, MetricsError};
use dmac_core::soc::{DmacConfig, Soc};
use dmac_harness::config;
use dmac_harness::experiments::{self, Cell, SweepSpec};

fn dmacsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmacsim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn run_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = config::preset("speculation", 13, 64).unwrap();
    sc.workload.transfer_count = 64;
    let path = dir.path().join("spec.toml");
    std::fs::write(&path, config::to_toml(&sc).unwrap()).unwrap();
    let o = dmacsim(
        &["run", "--config", path.to_str().unwrap(), "--csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("speculation,13,64,1.000000,"));
    let kv = std::fs::read_to_string(dir.path().join("run.txt")).unwrap();
    assert!(kv.contains("transfers = 64"));
}

#[test]
fn one_cell_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dmacsim(
        &[
            "run",
            "--preset",
            "base",
            "--latency",
            "13",
            "--size",
            "128",
        ],
        dir.path(),
    );
    assert!(run.status.success());
    let sweep = dmacsim(
        &[
            "sweep",
            "--configs",
            "base",
            "--sizes",
            "128",
            "--latencies",
            "13",
        ],
        dir.path(),
    );
    assert!(sweep.status.success());
    let a = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_output_is_reproducible_and_plotted() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = [
        "sweep",
        "--configs",
        "base,baseline,speculation",
        "--sizes",
        "8,64,512",
        "--latencies",
        "1,13",
        "--plots",
    ];
    let a = dmacsim(&[&args[..], &["--jobs", "1"]].concat(), d1.path());
    let b = dmacsim(&[&args[..], &["--jobs", "4"]].concat(), d2.path());
    assert!(a.status.success() && b.status.success());
    let csv = |d: &Path| std::fs::read(d.join("sweep.csv")).unwrap();
    assert_eq!(csv(d1.path()), csv(d2.path()));
    assert_eq!(
        String::from_utf8(csv(d1.path())).unwrap().lines().count(),
        1 + 3 * 3 * 2
    );
    for l in [1, 13] {
        let svg = std::fs::read_to_string(d1.path().join(format!("sweep_L{l}.svg"))).unwrap();
        assert_eq!(
            svg.matches("<polyline").count(),
            4,
            "three configs and the ideal curve"
        );
    }
}

#[test]
fn selftest_single_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmacsim(&["selftest", "--only", "7"], dir.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS criterion 7"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[memory]\none_way_latency = -1\n").unwrap();
    let o = dmacsim(&["run", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = dmacsim(&["miss-sweep", "--preset", "base"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dmacsim(&["run", "--preset", "warp"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn miss_sweep_consistent_with_run() {
    let t = config::preset("speculation", 13, 64).unwrap();
    let rows =
        experiments::miss_sweep(&t, "speculation", 13, &[64, 256], &[1.0, 0.5, 0.0], 2).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(experiments::monotonicity_violations(&rows).is_empty());
    let direct = dmac_core::run::run_scenario(&t).unwrap().report;
    assert_eq!(rows[0], direct);
    // hit rate zero: utilization recorded against the no-speculation run
    let base = experiments::run_cell(
        &t,
        &Cell {
            config: "base".into(),
            latency: 13,
            size: 64,
            hit_rate: 1.0,
        },
    )
    .unwrap();
    let miss = rows
        .iter()
        .find(|r| r.size == 64 && r.hit_rate == 0.0)
        .unwrap();
    assert!(miss.utilization > 0.95 * base.utilization);
}

#[test]
fn failing_cell_is_named() {
    let mut t = config::preset("base", 1, 64).unwrap();
    t.workload.transfer_count = 32;
    t.max_cycles = 50;
    let spec = SweepSpec {
        configs: vec!["base".into()],
        sizes: vec![4096],
        latencies: vec![100],
        hit_rates: vec![1.0],
    };
    let err = experiments::sweep(&t, &spec, 1).unwrap_err().to_string();
    assert!(err.starts_with("cell base L=100 n=4096"), "{err}");
    assert!(err.contains("stalled"), "{err}");
}

#[test]
fn probes_undefined_before_any_transfer() {
    let soc = Soc::new(&DmacConfig::scaled(), MemoryConfig::default()).unwrap();
    assert_eq!(
        latency_probes(&soc.probes()),
        Err(MetricsError::ProbeMissing("i_rf"))
    );
}
