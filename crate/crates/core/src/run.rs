//! One complete experiment: build the system, preload a workload, launch
//! every chain through the CSR, run until idle, check memory, and report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::CsrStatus;
use crate::mem::{MemoryConfig, TrafficClass};
use crate::metrics::{measure_utilization, MeasurementWindow, MetricsError, RunReport};
use crate::sim::{SimError, Simulation};
use crate::soc::{DmacConfig, Soc, SocError};
use crate::workload::{IntegrityError, Workload, WorkloadError, WorkloadSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub dmac: DmacConfig,
    pub memory: MemoryConfig,
    pub workload: WorkloadSpec,
    pub seed: u64,
    pub window: MeasurementWindow,
    pub max_cycles: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "base".into(),
            dmac: DmacConfig::base(),
            memory: MemoryConfig::default(),
            workload: WorkloadSpec::default(),
            seed: 1,
            window: MeasurementWindow::default(),
            max_cycles: 50_000_000,
        }
    }
}

impl Scenario {
    /// A named configuration at one-way latency `latency` moving
    /// `transfers` transfers of `size` bytes.
    pub fn named(config: &str, latency: u64, size: u32) -> Option<Self> {
        Some(Scenario {
            name: config.to_string(),
            dmac: DmacConfig::named(config)?,
            memory: MemoryConfig::with_latency(latency),
            workload: WorkloadSpec::fixed(MeasurementWindow::default().required_transfers(), size),
            ..Default::default()
        })
    }

    /// Measurement window shrunk to fit short workloads.
    pub fn effective_window(&self) -> MeasurementWindow {
        let n = self.workload.transfer_count;
        if self.window.required_transfers() <= n {
            return self.window;
        }
        let warmup = self.window.warmup_transfers.min(n / 4);
        let cooldown = self.window.cooldown_transfers.min(n / 4);
        MeasurementWindow {
            warmup_transfers: warmup,
            measured_transfers: n - warmup - cooldown,
            cooldown_transfers: cooldown,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Soc(#[from] SocError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("simulation stalled at cycle {last_cycle}: {completed}/{expected} descriptors completed ({source})")]
    Deadlock {
        last_cycle: u64,
        completed: usize,
        expected: usize,
        source: SimError,
    },
    #[error("integrity check failed: {0}")]
    Integrity(#[from] IntegrityError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub struct RunOutcome {
    pub report: RunReport,
    pub soc: Soc,
    pub workload: Workload,
}

/// Build the system and backdoor-load the workload without launching it.
pub fn prepare(sc: &Scenario) -> Result<(Soc, Workload), RunError> {
    let mut soc = Soc::new(&sc.dmac, sc.memory)?;
    let workload = sc.workload.generate(sc.seed)?;
    workload.preload(soc.memory_mut())?;
    Ok((soc, workload))
}

/// Launch every chain, retrying while the CSR queue is full, and run to idle.
pub fn execute(soc: &mut Soc, workload: &Workload, max_cycles: u64) -> Result<(), RunError> {
    let stalled = |soc: &Soc, source| RunError::Deadlock {
        last_cycle: soc.now().0,
        completed: soc.fetch_unit().completed().len(),
        expected: workload.descriptor_count(),
        source,
    };
    for head in workload.heads() {
        while soc.csr_write(head) == CsrStatus::Busy {
            if soc.step().is_none() || soc.now().0 > max_cycles {
                return Err(stalled(
                    soc,
                    SimError::Exhausted {
                        max_cycles,
                        last_cycle: soc.now(),
                    },
                ));
            }
        }
    }
    soc.run_to_idle(max_cycles).map_err(|e| stalled(soc, e))?;
    Ok(())
}

/// Assemble the report for a finished run.
pub fn report(sc: &Scenario, soc: &Soc, workload: &Workload) -> Result<RunReport, RunError> {
    let unit = soc.fetch_unit();
    let stats = unit.stats();
    let bus = soc.bus();
    let probes = soc.probes();
    let transfers = workload.transfers.len();
    let utilization = if sc.workload.nominal_size() == 0 {
        0.0
    } else {
        measure_utilization(soc.backend(), &sc.effective_window(), transfers)?.utilization
    };
    let fetched = bus.beats_of_class(TrafficClass::Descriptor)
        + bus.beats_of_class(TrafficClass::Speculative);
    Ok(RunReport {
        config: sc.name.clone(),
        latency: sc.memory.one_way_latency,
        size: sc.workload.nominal_size(),
        hit_rate: sc.workload.hit_rate(),
        utilization,
        i_rf: probes.i_rf,
        rf_rb: probes.rf_rb,
        r_w: probes.r_w,
        payload_beats: bus.beats_of_class(TrafficClass::Payload),
        descriptor_beats: fetched - stats.wasted_beats,
        wasted_beats: stats.wasted_beats,
        writeback_beats: bus.beats_of_class(TrafficClass::Writeback),
        hits: stats.hits,
        misses: stats.misses,
        total_cycles: soc.now().0,
        transfers: unit.completed().len() as u64,
        irqs: stats.irqs,
        discarded_fetches: stats.discarded_fetches,
    })
}

/// Full flow including the post-run memory checks.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutcome, RunError> {
    let (mut soc, workload) = prepare(sc)?;
    execute(&mut soc, &workload, sc.max_cycles)?;
    workload.check_payload(soc.memory())?;
    workload.check_markers(soc.memory())?;
    let report = report(sc, &soc, &workload)?;
    Ok(RunOutcome {
        report,
        soc,
        workload,
    })
}
