//! The acceptance checks, shared by `dmacsim selftest` and the acceptance
//! test target. Each check returns a verdict and a one-line detail.

use std::collections::HashMap;

use dmac_core::descriptor::{ConfigFlags, Descriptor};
use dmac_core::driver::{DriverConfig, DriverSim, HandleState};
use dmac_core::interconnect::Interconnect;
use dmac_core::mem::{Direction, MemoryConfig, TrafficClass};
use dmac_core::metrics::{estimate_area, ideal_utilization};
use dmac_core::run::{execute, prepare, run_scenario, Scenario};
use dmac_core::sim::SimTime;
use dmac_core::soc::{DmacConfig, Soc};
use dmac_core::workload::{SizeDistribution, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::experiments::{latency_row, run_cell, Cell};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(id: u8, name: &'static str, failures: Vec<String>, ok: String) -> Self {
        Check {
            id,
            name,
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                ok
            } else {
                failures.join("; ")
            },
        }
    }

    fn error(id: u8, name: &'static str, e: impl std::fmt::Display) -> Self {
        Check {
            id,
            name,
            passed: false,
            detail: e.to_string(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} criterion {}: {} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

type Runner = fn() -> Check;

pub const ALL: [(u8, Runner); 9] = [
    (1, ideal_law),
    (2, latency_table),
    (3, prefetch_effect),
    (4, deep_memory),
    (5, baseline_gap),
    (6, zero_penalty),
    (7, area_model),
    (8, invariants),
    (9, driver_flow),
];

pub fn run_all() -> Vec<Check> {
    ALL.iter().map(|(_, f)| f()).collect()
}

pub fn run_one(id: u8) -> Option<Check> {
    ALL.iter().find(|(i, _)| *i == id).map(|(_, f)| f())
}

fn utilization(
    config: &str,
    latency: u64,
    size: u32,
) -> Result<f64, crate::experiments::HarnessError> {
    let template = crate::config::preset(config, latency, size)?;
    let cell = Cell {
        config: config.to_string(),
        latency,
        size,
        hit_rate: 1.0,
    };
    Ok(run_cell(&template, &cell)?.utilization)
}

fn ratio_to_ideal(
    config: &str,
    latency: u64,
    size: u32,
) -> Result<f64, crate::experiments::HarnessError> {
    Ok(utilization(config, latency, size)? / ideal_utilization(size as u64))
}

pub fn ideal_law() -> Check {
    const NAME: &str = "base utilization follows n/(n+32) at L=1";
    let sizes = [8u32, 16, 32, 64, 128, 256, 512, 1024, 4096];
    let got: Result<Vec<(u32, f64)>, _> = sizes
        .par_iter()
        .map(|&n| utilization("base", 1, n).map(|u| (n, u)))
        .collect();
    let got = match got {
        Ok(g) => g,
        Err(e) => return Check::error(1, NAME, e),
    };
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for (n, u) in got {
        let err = (u - ideal_utilization(n as u64)).abs();
        worst = worst.max(err);
        if err > 0.01 {
            fails.push(format!(
                "n={n}: {u:.4} vs {:.4}",
                ideal_utilization(n as u64)
            ));
        }
    }
    Check::new(1, NAME, fails, format!("max deviation {worst:.4}"))
}

pub fn latency_table() -> Check {
    const NAME: &str = "main latency probes i_rf=3, rf_rb=8/32/206, r_w=1";
    let mut fails = Vec::new();
    for config in ["base", "speculation", "scaled"] {
        match latency_row(config, &[1, 13, 100]) {
            Ok(r) => {
                let got = (
                    r.i_rf,
                    r.rf_rb.iter().map(|x| x.1).collect::<Vec<_>>(),
                    r.r_w,
                );
                if got != (3, vec![8, 32, 206], 1) {
                    fails.push(format!("{config}: {got:?}"));
                }
            }
            Err(e) => fails.push(e.to_string()),
        }
    }
    Check::new(
        2,
        NAME,
        fails,
        "exact for base, speculation and scaled".into(),
    )
}

pub fn prefetch_effect() -> Check {
    const NAME: &str = "prefetching reaches ideal at 64 B for L=13";
    let cases = [
        ("speculation", 64u32),
        ("base", 64),
        ("base", 128),
        ("base", 256),
        ("base", 512),
    ];
    let got: Result<Vec<f64>, _> = cases
        .par_iter()
        .map(|&(c, n)| ratio_to_ideal(c, 13, n))
        .collect();
    let r = match got {
        Ok(r) => r,
        Err(e) => return Check::error(3, NAME, e),
    };
    let mut fails = Vec::new();
    if r[0] < 0.99 {
        fails.push(format!("speculation n=64 at {:.3} of ideal", r[0]));
    }
    if r[1] >= 0.95 {
        fails.push(format!("base n=64 at {:.3} of ideal", r[1]));
    }
    if r[2] >= 0.99 {
        fails.push(format!("base already ideal at n=128 ({:.3})", r[2]));
    }
    for (i, n) in [(3, 256), (4, 512)] {
        if r[i] < 0.99 {
            fails.push(format!("base n={n} at {:.3} of ideal", r[i]));
        }
    }
    Check::new(
        3,
        NAME,
        fails,
        format!(
            "speculation@64 {:.3}, base@64 {:.3}, base@128 {:.3}, base@256 {:.3}",
            r[0], r[1], r[2], r[3]
        ),
    )
}

pub fn deep_memory() -> Check {
    const NAME: &str = "scaled reaches ideal at 128 B for L=100";
    match ratio_to_ideal("scaled", 100, 128) {
        Ok(r) if r >= 0.99 => Check::new(4, NAME, vec![], format!("{r:.4} of ideal")),
        Ok(r) => Check::new(4, NAME, vec![format!("{r:.4} of ideal")], String::new()),
        Err(e) => Check::error(4, NAME, e),
    }
}

pub fn baseline_gap() -> Check {
    const NAME: &str = "gain over the baseline at 64 B";
    let cases = [
        ("base", 1u64),
        ("baseline", 1),
        ("base", 13),
        ("speculation", 13),
        ("baseline", 13),
    ];
    let got: Result<Vec<f64>, _> = cases
        .par_iter()
        .map(|&(c, l)| utilization(c, l, 64))
        .collect();
    let u = match got {
        Ok(u) => u,
        Err(e) => return Check::error(5, NAME, e),
    };
    let (ideal, base13, spec13) = (u[0] / u[1], u[2] / u[4], u[3] / u[4]);
    let mut fails = Vec::new();
    if !(2.0..=3.0).contains(&ideal) {
        fails.push(format!("L=1 ratio {ideal:.2}"));
    }
    if base13 < 1.5 {
        fails.push(format!("L=13 base ratio {base13:.2}"));
    }
    if spec13 < 3.0 {
        fails.push(format!("L=13 speculation ratio {spec13:.2}"));
    }
    Check::new(
        5,
        NAME,
        fails,
        format!("L=1 {ideal:.2}x, L=13 base {base13:.2}x, L=13 speculation {spec13:.2}x"),
    )
}

/// Mispredicted fetches against the paired run without speculation: the
/// wait between learning the real next address and issuing its fetch must
/// be identical.
pub fn zero_penalty() -> Check {
    const NAME: &str = "mispredictions cost nothing against no speculation";
    let rates = [0.0, 0.25, 0.5, 0.75];
    let results: Vec<Result<(usize, Vec<String>), String>> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let h = rates[(i % 4) as usize];
            let w = WorkloadSpec {
                sizes: SizeDistribution::Set(vec![8, 32, 64, 100, 256, 1024]),
                ..WorkloadSpec::fixed(64, 0)
            }
            .with_hit_rate(h, i);
            let run = |dmac: DmacConfig| {
                run_scenario(&Scenario {
                    dmac,
                    memory: MemoryConfig::with_latency([1, 13, 100][(i % 3) as usize]),
                    workload: w.clone(),
                    seed: i,
                    ..Default::default()
                })
                .map_err(|e| format!("workload {i}: {e}"))
            };
            let spec = run(DmacConfig::speculation())?;
            let base = run(DmacConfig::base())?;
            let paired: HashMap<u64, u64> = base
                .soc
                .frontend()
                .unwrap()
                .arch_fetches()
                .iter()
                .filter_map(|f| f.next_known_at.map(|k| (f.address, f.issued_at.0 - k.0)))
                .collect();
            let mut checked = 0;
            let mut bad = Vec::new();
            for f in spec
                .soc
                .frontend()
                .unwrap()
                .arch_fetches()
                .iter()
                .filter(|f| f.mispredicted)
            {
                checked += 1;
                let delay = f.issued_at.0 - f.next_known_at.map_or(0, |k| k.0);
                if paired.get(&f.address) != Some(&delay) {
                    bad.push(format!(
                        "workload {i} h={h} @{:#x}: {delay} vs {:?}",
                        f.address,
                        paired.get(&f.address)
                    ));
                }
            }
            Ok((checked, bad))
        })
        .collect();
    let mut fails = Vec::new();
    let mut checked = 0;
    for r in results {
        match r {
            Ok((n, bad)) => {
                checked += n;
                fails.extend(bad);
            }
            Err(e) => fails.push(e),
        }
    }
    if checked == 0 {
        fails.push("no mispredictions occurred".into());
    }
    fails.truncate(5);
    Check::new(
        6,
        NAME,
        fails,
        format!("{checked} mispredicted fetches over 100 workloads"),
    )
}

pub fn area_model() -> Check {
    const NAME: &str = "area model";
    let mut fails = Vec::new();
    for (d, s, want) in [(4, 0, 41.42), (4, 4, 49.18), (24, 24, 193.58)] {
        if estimate_area(d, s) != want {
            fails.push(format!("({d},{s}) -> {}", estimate_area(d, s)));
        }
    }
    for d in 1..=32 {
        for s in 0..=32 {
            let a = estimate_area(d, s);
            let step_d = if d < 32 {
                estimate_area(d + 1, s) - a
            } else {
                5.28
            };
            let step_s = if s < 32 {
                estimate_area(d, s + 1) - a
            } else {
                1.94
            };
            if (step_d - 5.28).abs() > 1e-9 || (step_s - 1.94).abs() > 1e-9 {
                fails.push(format!("not affine at ({d},{s})"));
            }
        }
    }
    fails.truncate(5);
    Check::new(
        7,
        NAME,
        fails,
        "table values exact, affine on the grid".into(),
    )
}

fn descriptor_round_trip(fails: &mut Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD35C);
    for i in 0..10_000 {
        let d = Descriptor {
            length: rng.gen(),
            config: ConfigFlags(rng.gen()),
            next: rng.gen(),
            source: rng.gen(),
            destination: rng.gen(),
        };
        let rec = d.encode();
        if Descriptor::decode(&rec).ok() != Some(d) {
            fails.push(format!("record {i} did not round-trip"));
            return;
        }
        let raw: [u8; 32] = rng.gen();
        if Descriptor::decode(&raw).map(|d| d.encode()).ok() != Some(raw) {
            fails.push(format!("raw record {i} did not round-trip"));
            return;
        }
    }
}

/// Runs covering every configuration and placement mode. `run_scenario`
/// itself verifies payload and completion markers.
fn protocol_runs(fails: &mut Vec<String>) -> usize {
    let mut cases = Vec::new();
    for config in ["base", "speculation", "scaled", "baseline"] {
        for latency in [1u64, 13, 100] {
            for (k, h) in [1.0, 0.5, 0.0].into_iter().enumerate() {
                cases.push((config, latency, h, k as u64));
            }
        }
    }
    let results: Vec<Result<(), String>> = cases
        .par_iter()
        .map(|&(config, latency, h, k)| {
            let mut sc = crate::config::preset(config, latency, 0).unwrap();
            sc.workload = WorkloadSpec {
                sizes: SizeDistribution::Set(vec![1, 8, 13, 64, 77, 256, 1000, 4096]),
                chains: 1 + k as usize,
                ..WorkloadSpec::fixed(96, 0)
            };
            if h < 1.0 {
                sc.workload = sc.workload.with_hit_rate(h, latency + k);
            }
            sc.seed = latency * 10 + k;
            let out = run_scenario(&sc).map_err(|e| format!("{config} L={latency} h={h}: {e}"))?;
            let b = out.soc.bounds();
            if b.violations > 0 {
                return Err(format!(
                    "{config} L={latency} h={h}: {} bound violations",
                    b.violations
                ));
            }
            if out.report.transfers != 96 {
                return Err(format!(
                    "{config} L={latency}: {} of 96 completed",
                    out.report.transfers
                ));
            }
            Ok(())
        })
        .collect();
    let n = results.len();
    fails.extend(results.into_iter().filter_map(Result::err));
    n
}

fn fairness(fails: &mut Vec<String>) {
    let mut bus = Interconnect::new(MemoryConfig::default());
    let a = bus.register_port();
    let b = bus.register_port();
    for dir in [Direction::Read, Direction::Write] {
        for _ in 0..200 {
            for p in [a, b] {
                bus.request(p, dir, 0, 3, 8, TrafficClass::Payload, SimTime(0))
                    .unwrap();
            }
        }
    }
    for t in 1..=600 {
        bus.arbitrate(SimTime(t));
        for dir in [Direction::Read, Direction::Write] {
            let (ga, gb) = (bus.grants(a, dir), bus.grants(b, dir));
            if ga.abs_diff(gb) > 1 {
                fails.push(format!("{} grants {ga} vs {gb} at cycle {t}", dir.as_str()));
                return;
            }
        }
    }
}

fn determinism(fails: &mut Vec<String>) {
    let sc = Scenario {
        dmac: DmacConfig::speculation(),
        memory: MemoryConfig::with_latency(13),
        workload: WorkloadSpec {
            sizes: SizeDistribution::Set(vec![8, 64, 300]),
            ..WorkloadSpec::fixed(80, 0)
        }
        .with_hit_rate(0.5, 21),
        seed: 21,
        ..Default::default()
    };
    let trace = || -> Result<_, String> {
        let (mut soc, w) = prepare(&sc).map_err(|e| e.to_string())?;
        soc.enable_event_trace();
        soc.enable_bus_trace();
        execute(&mut soc, &w, sc.max_cycles).map_err(|e| e.to_string())?;
        Ok((soc.event_trace().to_vec(), soc.bus().trace().to_vec()))
    };
    match (trace(), trace()) {
        (Ok(a), Ok(b)) if a == b && !a.0.is_empty() => {}
        (Ok(_), Ok(_)) => fails.push("two identical runs diverged".into()),
        (Err(e), _) | (_, Err(e)) => fails.push(e),
    }
}

pub fn invariants() -> Check {
    const NAME: &str = "integrity and protocol invariants";
    let mut fails = Vec::new();
    descriptor_round_trip(&mut fails);
    let runs = protocol_runs(&mut fails);
    fairness(&mut fails);
    determinism(&mut fails);
    fails.truncate(5);
    Check::new(
        8,
        NAME,
        fails,
        format!("10000 records round-trip, {runs} runs intact within bounds, fair arbitration, deterministic traces"),
    )
}

pub fn driver_flow() -> Check {
    const NAME: &str = "driver with four concurrent chains";
    let mut fails = Vec::new();
    for config in ["base", "speculation", "baseline"] {
        let soc = match Soc::new(
            &DmacConfig::named(config).unwrap(),
            MemoryConfig::with_latency(13),
        ) {
            Ok(s) => s,
            Err(e) => return Check::error(9, NAME, e),
        };
        let mut sim = DriverSim::new(soc, DriverConfig::default());
        let calls = std::rc::Rc::new(std::cell::RefCell::new(HashMap::<usize, u32>::new()));
        let mut handles = Vec::new();
        let mut want_irq = 0usize;
        for i in 0..10u64 {
            let irq = i % 4 != 1;
            want_irq += irq as usize;
            let src = 0x100_0000 + i * 0x1000;
            let pattern: Vec<u8> = (0..512u32).map(|b| (b as u8) ^ (i as u8)).collect();
            sim.soc.memory_mut().backdoor_write(src, &pattern).unwrap();
            let mut ids = Vec::new();
            for part in 0..2u64 {
                let last = part == 1;
                let h = sim
                    .driver
                    .prepare_memcpy(
                        &mut sim.soc,
                        src + part * 256,
                        0x400_0000 + i * 0x1000 + part * 256,
                        256,
                        !last || irq,
                    )
                    .unwrap();
                let c = calls.clone();
                sim.driver.set_callback(
                    h,
                    Box::new(move |_, _, id| *c.borrow_mut().entry(id).or_default() += 1),
                );
                ids.push(h);
            }
            sim.driver.commit(&mut sim.soc, &ids).unwrap();
            handles.extend(ids);
        }
        sim.driver.issue(&mut sim.soc);
        if let Err(e) = sim.run(10_000_000) {
            fails.push(format!("{config}: {e}"));
            continue;
        }
        let st = sim.driver.stats().clone();
        let complete = handles
            .iter()
            .all(|&h| sim.driver.handle(h).map(|x| x.state) == Some(HandleState::Completed));
        let once = handles.iter().all(|h| calls.borrow().get(h) == Some(&1));
        let irqs = sim.soc.irq_log().len();
        if st.peak_active != 4
            || st.csr_launches != 10
            || st.chains_retired != 10
            || !complete
            || !once
            || irqs != want_irq
        {
            fails.push(format!(
                "{config}: peak {} launches {} retired {} complete {complete} once {once} irqs {irqs}/{want_irq}",
                st.peak_active, st.csr_launches, st.chains_retired
            ));
        }
        for i in 0..10u64 {
            let a = sim
                .soc
                .memory()
                .backdoor_read(0x100_0000 + i * 0x1000, 512)
                .unwrap();
            let b = sim
                .soc
                .memory()
                .backdoor_read(0x400_0000 + i * 0x1000, 512)
                .unwrap();
            if a != b {
                fails.push(format!("{config}: chain {i} copied wrong data"));
            }
        }
    }
    Check::new(
        9,
        NAME,
        fails,
        "peak 4 launches, 10 chains, one callback per handle, IRQs as flagged".into(),
    )
}
