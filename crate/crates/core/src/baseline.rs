//! Serialized-fetch reference DMAC: a wide descriptor read over a narrow
//! 32-bit port, one descriptor at a time, no speculation. The payload side
//! reuses the regular backend.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::descriptor::{Descriptor, DESCRIPTOR_ALIGN, DESCRIPTOR_BYTES, END_OF_CHAIN};
use crate::frontend::{ConfigError, CsrStatus, FrontendStats, RecordState, TransferRecord};
use crate::mem::{Direction, MemoryConfig, PortId, TrafficClass, TxnId};
use crate::metrics::RunReport;
use crate::run::{run_scenario, RunError, Scenario};
use crate::sim::SimTime;
use crate::soc::{Ctx, DmacConfig, FetchUnit, Msg, BACKEND, FRONTEND, HOST};
use crate::workload::WorkloadSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Size of the full descriptor record.
    pub descriptor_bits: u32,
    /// Portion of it that is actually fetched.
    pub descriptor_read_bits: u32,
    pub descriptor_port_width: u32,
    pub in_flight: usize,
    pub csr_queue_depth: usize,
    /// CSR acceptance to the first descriptor read request.
    pub csr_to_request: u64,
    /// Last descriptor beat to the backend seeing the transfer, minus one.
    pub decode_to_backend: u64,
    /// Backend hand-off to the next descriptor read request.
    pub dispatch_to_next_fetch: u64,
    pub backend: BackendConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            descriptor_bits: 416,
            descriptor_read_bits: 256,
            descriptor_port_width: 32,
            in_flight: 4,
            csr_queue_depth: 4,
            csr_to_request: 10,
            decode_to_backend: 11,
            dispatch_to_next_fetch: 10,
            backend: BackendConfig::default(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.in_flight == 0 {
            return Err(ConfigError::NoDescriptorsInFlight);
        }
        if self.csr_queue_depth == 0 {
            return Err(ConfigError::NoCsrQueue);
        }
        self.backend.validate()
    }

    pub fn port_bytes(&self) -> u32 {
        self.descriptor_port_width / 8
    }

    pub fn fetch_beats(&self) -> u32 {
        self.descriptor_read_bits / self.descriptor_port_width
    }
}

#[derive(Debug)]
struct Fetch {
    addr: u64,
    txn: TxnId,
    buf: Vec<u8>,
    beats_seen: u32,
    fault: bool,
}

#[derive(Debug)]
pub struct BaselineFrontend {
    cfg: BaselineConfig,
    port: PortId,
    csr: VecDeque<(u64, SimTime)>,
    /// Next descriptor to read and the first cycle it may be requested.
    pending: Option<(u64, SimTime)>,
    running: bool,
    fetch: Option<Fetch>,
    credits_in_use: usize,
    next_seq: u64,
    writebacks: HashMap<TxnId, (u64, bool)>,
    first_request: Option<SimTime>,
    stats: FrontendStats,
    completed: Vec<(u64, SimTime)>,
}

impl BaselineFrontend {
    pub fn new(cfg: BaselineConfig, port: PortId) -> Self {
        BaselineFrontend {
            cfg,
            port,
            csr: VecDeque::new(),
            pending: None,
            running: false,
            fetch: None,
            credits_in_use: 0,
            next_seq: 0,
            writebacks: HashMap::new(),
            first_request: None,
            stats: FrontendStats::default(),
            completed: Vec::new(),
        }
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn status(&self) -> (bool, usize) {
        (!FetchUnit::is_idle(self), self.csr.len())
    }

    fn finish_chain(&mut self, fault: bool) {
        if fault {
            self.stats.faults += 1;
        }
        self.running = false;
        self.pending = None;
        self.stats.chains_finished += 1;
    }

    fn descriptor_done(&mut self, ctx: &mut Ctx) {
        let f = self.fetch.take().expect("fetch in flight");
        if f.fault {
            self.credits_in_use -= 1;
            self.finish_chain(true);
            return;
        }
        let descriptor = Descriptor::decode(&f.buf[..DESCRIPTOR_BYTES]).expect("32 bytes");
        let record = TransferRecord {
            descriptor_address: f.addr,
            descriptor,
            state: RecordState::Dispatched,
            completion_cycle: None,
            seq: self.next_seq,
            failed: false,
        };
        self.next_seq += 1;
        let dispatch_at = ctx.now.after(1 + self.cfg.decode_to_backend);
        ctx.events
            .schedule(dispatch_at, BACKEND, Msg::Dispatch(record));
        let next = descriptor.next;
        if next == END_OF_CHAIN {
            self.finish_chain(false);
        } else if !next.is_multiple_of(DESCRIPTOR_ALIGN)
            || (f.addr..f.addr + DESCRIPTOR_ALIGN).contains(&next)
        {
            self.finish_chain(true);
        } else {
            let ready = dispatch_at.after(self.cfg.dispatch_to_next_fetch);
            self.pending = Some((next, ready));
            ctx.events.schedule(ready, FRONTEND, Msg::Wake);
        }
    }
}

impl FetchUnit for BaselineFrontend {
    fn csr_write(&mut self, head: u64, ctx: &mut Ctx) -> CsrStatus {
        if self.csr.len() >= self.cfg.csr_queue_depth {
            return CsrStatus::Busy;
        }
        let ready = ctx.now.after(self.cfg.csr_to_request);
        self.csr.push_back((head, ready));
        ctx.events.schedule(ready, FRONTEND, Msg::Wake);
        CsrStatus::Accepted
    }

    fn tick(&mut self, ctx: &mut Ctx) {
        if !self.running {
            if let Some(&(head, ready)) = self.csr.front() {
                if ready <= ctx.now {
                    self.csr.pop_front();
                    self.running = true;
                    self.pending = Some((head, ready));
                }
            }
        }
        let Some((addr, ready)) = self.pending else {
            return;
        };
        if ready > ctx.now || self.fetch.is_some() || self.credits_in_use >= self.cfg.in_flight {
            return;
        }
        let bpb = self.cfg.port_bytes();
        let txn = ctx
            .bus
            .request(
                self.port,
                Direction::Read,
                addr,
                self.cfg.fetch_beats(),
                bpb,
                TrafficClass::Descriptor,
                ctx.now,
            )
            .expect("baseline port registered");
        self.first_request.get_or_insert(ctx.now);
        self.credits_in_use += 1;
        self.pending = None;
        self.fetch = Some(Fetch {
            addr,
            txn,
            buf: Vec::with_capacity((self.cfg.fetch_beats() * bpb) as usize),
            beats_seen: 0,
            fault: false,
        });
    }

    fn wants_tick(&self, now: SimTime) -> bool {
        let credit = self.credits_in_use < self.cfg.in_flight;
        match self.pending {
            Some((_, ready)) => credit && self.fetch.is_none() && ready <= now.after(1),
            None => !self.running && self.csr.front().is_some_and(|&(_, r)| r <= now.after(1)),
        }
    }

    fn on_read_beat(&mut self, txn: TxnId, _index: u32, data: &[u8], fault: bool, ctx: &mut Ctx) {
        let Some(f) = self.fetch.as_mut().filter(|f| f.txn == txn) else {
            return;
        };
        f.buf.extend_from_slice(data);
        f.fault |= fault;
        f.beats_seen += 1;
        if f.beats_seen == self.cfg.fetch_beats() {
            self.descriptor_done(ctx);
        }
    }

    fn on_write_ack(&mut self, txn: TxnId, ctx: &mut Ctx) {
        let Some((addr, irq)) = self.writebacks.remove(&txn) else {
            return;
        };
        self.completed.push((addr, ctx.now));
        if irq {
            self.stats.irqs += 1;
            ctx.events.schedule(
                ctx.now,
                HOST,
                Msg::Irq {
                    descriptor_address: addr,
                },
            );
        }
    }

    fn on_backend_done(&mut self, record: &TransferRecord, ctx: &mut Ctx) {
        if record.failed {
            return;
        }
        let bpb = self.cfg.port_bytes();
        let addr = record.descriptor_address;
        let beats = 8 / bpb;
        let txn = ctx
            .bus
            .request(
                self.port,
                Direction::Write,
                addr,
                beats,
                bpb,
                TrafficClass::Writeback,
                ctx.now,
            )
            .expect("baseline port registered");
        for b in 0..beats {
            ctx.bus
                .push_write_beat(txn, b, addr + (b * bpb) as u64, vec![0xFF; bpb as usize])
                .expect("write registered");
        }
        self.stats.writebacks += 1;
        self.writebacks
            .insert(txn, (addr, record.descriptor.config.irq_on_completion()));
    }

    fn release_credit(&mut self) {
        assert!(self.credits_in_use > 0, "credit released twice");
        self.credits_in_use -= 1;
    }

    fn is_idle(&self) -> bool {
        self.csr.is_empty()
            && !self.running
            && self.fetch.is_none()
            && self.writebacks.is_empty()
            && self.credits_in_use == 0
    }

    fn first_request(&self) -> Option<SimTime> {
        self.first_request
    }

    fn stats(&self) -> &FrontendStats {
        &self.stats
    }

    fn completed(&self) -> &[(u64, SimTime)] {
        &self.completed
    }

    fn credits_in_use(&self) -> usize {
        self.credits_in_use
    }

    fn spec_outstanding(&self) -> usize {
        0
    }

    fn live_fetches(&self) -> usize {
        usize::from(self.fetch.is_some())
    }
}

/// Run `workload` on the reference controller.
pub fn run_baseline(
    workload: &WorkloadSpec,
    memory: MemoryConfig,
    seed: u64,
) -> Result<RunReport, RunError> {
    let sc = Scenario {
        name: "baseline".into(),
        dmac: DmacConfig::Baseline(BaselineConfig::default()),
        memory,
        workload: workload.clone(),
        seed,
        ..Default::default()
    };
    Ok(run_scenario(&sc)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_read_is_eight_narrow_beats() {
        let c = BaselineConfig::default();
        assert_eq!(c.fetch_beats(), 8);
        assert_eq!(c.port_bytes(), 4);
        assert_eq!(c.descriptor_bits / 32, 13);
    }

    #[test]
    fn rejects_zero_in_flight() {
        let c = BaselineConfig {
            in_flight: 0,
            ..Default::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::NoDescriptorsInFlight));
    }
}
