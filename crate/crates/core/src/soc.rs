//! The testbench system: one memory, one round-robin interconnect, a
//! descriptor frontend (main or baseline) and the payload backend, driven by
//! the event queue.
//!
//! Each active cycle first delivers that cycle's events, then settles the
//! combinational work in a fixed order: arbitration, read service, write
//! absorption, backend issue, frontend issue.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig};
use crate::baseline::{BaselineConfig, BaselineFrontend};
use crate::frontend::{
    ConfigError, CsrStatus, Frontend, FrontendConfig, FrontendStats, TransferRecord,
};
use crate::interconnect::Interconnect;
use crate::mem::{MemError, Memory, MemoryConfig, PortId, TxnId};
use crate::sim::{run_until, ComponentId, Event, EventQueue, SimError, SimTime, Simulation};

pub const BUS: ComponentId = ComponentId(0);
pub const FRONTEND: ComponentId = ComponentId(1);
pub const BACKEND: ComponentId = ComponentId(2);
pub const HOST: ComponentId = ComponentId(3);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Msg {
    Wake,
    ReadBeat {
        txn: TxnId,
        index: u32,
        data: Vec<u8>,
        fault: bool,
    },
    WriteAck {
        txn: TxnId,
        fault: bool,
    },
    Dispatch(TransferRecord),
    /// A payload write beat has its data and may be handed to the bus.
    WriteData {
        txn: TxnId,
        index: u32,
    },
    Irq {
        descriptor_address: u64,
    },
}

/// What a component may touch while handling an event or a tick.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub events: &'a mut EventQueue<Msg>,
    pub bus: &'a mut Interconnect,
}

/// Common surface of the two descriptor frontends.
pub trait FetchUnit {
    fn csr_write(&mut self, head: u64, ctx: &mut Ctx) -> CsrStatus;
    fn tick(&mut self, ctx: &mut Ctx);
    fn wants_tick(&self, now: SimTime) -> bool;
    fn on_read_beat(&mut self, txn: TxnId, index: u32, data: &[u8], fault: bool, ctx: &mut Ctx);
    fn on_write_ack(&mut self, txn: TxnId, ctx: &mut Ctx);
    fn on_backend_done(&mut self, record: &TransferRecord, ctx: &mut Ctx);
    fn release_credit(&mut self);
    fn is_idle(&self) -> bool;
    fn first_request(&self) -> Option<SimTime>;
    fn stats(&self) -> &FrontendStats;
    fn completed(&self) -> &[(u64, SimTime)];
    fn credits_in_use(&self) -> usize;
    fn spec_outstanding(&self) -> usize;
    /// Descriptor reads in flight on the bus.
    fn live_fetches(&self) -> usize;
}

impl FetchUnit for Frontend {
    fn csr_write(&mut self, head: u64, ctx: &mut Ctx) -> CsrStatus {
        Frontend::csr_write(self, head, ctx)
    }
    fn tick(&mut self, ctx: &mut Ctx) {
        Frontend::tick(self, ctx)
    }
    fn wants_tick(&self, now: SimTime) -> bool {
        Frontend::wants_tick(self, now)
    }
    fn on_read_beat(&mut self, txn: TxnId, index: u32, data: &[u8], fault: bool, ctx: &mut Ctx) {
        Frontend::on_read_beat(self, txn, index, data, fault, ctx)
    }
    fn on_write_ack(&mut self, txn: TxnId, ctx: &mut Ctx) {
        Frontend::on_write_ack(self, txn, ctx)
    }
    fn on_backend_done(&mut self, record: &TransferRecord, ctx: &mut Ctx) {
        Frontend::on_backend_done(self, record, ctx)
    }
    fn release_credit(&mut self) {
        Frontend::release_credit(self)
    }
    fn is_idle(&self) -> bool {
        Frontend::is_idle(self)
    }
    fn first_request(&self) -> Option<SimTime> {
        Frontend::first_request(self)
    }
    fn stats(&self) -> &FrontendStats {
        Frontend::stats(self)
    }
    fn completed(&self) -> &[(u64, SimTime)] {
        Frontend::completed(self)
    }
    fn credits_in_use(&self) -> usize {
        Frontend::credits_in_use(self)
    }
    fn spec_outstanding(&self) -> usize {
        Frontend::spec_outstanding(self)
    }
    fn live_fetches(&self) -> usize {
        Frontend::live_fetches(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DmacConfig {
    Main {
        #[serde(default)]
        frontend: FrontendConfig,
        #[serde(default)]
        backend: BackendConfig,
    },
    Baseline(BaselineConfig),
}

impl DmacConfig {
    pub fn base() -> Self {
        DmacConfig::Main {
            frontend: FrontendConfig::base(),
            backend: BackendConfig::default(),
        }
    }

    pub fn speculation() -> Self {
        DmacConfig::Main {
            frontend: FrontendConfig::speculation(),
            backend: BackendConfig::default(),
        }
    }

    /// The large configuration also gets a deeper backend so it can keep
    /// enough payload bursts in flight to cover long memory latency.
    pub fn scaled() -> Self {
        DmacConfig::Main {
            frontend: FrontendConfig::scaled(),
            backend: BackendConfig::with_outstanding(24),
        }
    }

    pub fn baseline() -> Self {
        DmacConfig::Baseline(BaselineConfig::default())
    }

    /// Look up one of the named configurations.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::base()),
            "speculation" => Some(Self::speculation()),
            "scaled" => Some(Self::scaled()),
            "baseline" => Some(Self::baseline()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            DmacConfig::Main { frontend, backend } => {
                frontend.validate()?;
                backend.validate()
            }
            DmacConfig::Baseline(b) => b.validate(),
        }
    }

    pub fn prefetch_slots(&self) -> usize {
        match self {
            DmacConfig::Main { frontend, .. } => frontend.prefetch_slots,
            DmacConfig::Baseline(_) => 0,
        }
    }

    pub fn descriptors_in_flight(&self) -> usize {
        match self {
            DmacConfig::Main { frontend, .. } => frontend.descriptors_in_flight,
            DmacConfig::Baseline(b) => b.in_flight,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SocError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Debug)]
enum Engine {
    Main(Frontend),
    Baseline(BaselineFrontend),
}

impl Engine {
    fn unit(&self) -> &dyn FetchUnit {
        match self {
            Engine::Main(f) => f,
            Engine::Baseline(b) => b,
        }
    }

    fn unit_mut(&mut self) -> &mut dyn FetchUnit {
        match self {
            Engine::Main(f) => f,
            Engine::Baseline(b) => b,
        }
    }
}

/// First-transfer latency probes, in cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProbes {
    /// CSR acceptance to the first descriptor read request.
    pub i_rf: Option<u64>,
    /// First descriptor read request to the backend receiving the transfer.
    pub rf_rb: Option<u64>,
    /// Payload read beat to the write beat carrying its data.
    pub r_w: Option<u64>,
}

/// Upper bounds observed over every active cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundCheck {
    pub max_credits: usize,
    pub max_speculative: usize,
    pub max_descriptor_reads: usize,
    pub violations: u64,
}

pub struct Soc {
    config: DmacConfig,
    mem: Memory,
    bus: Interconnect,
    events: EventQueue<Msg>,
    engine: Engine,
    backend: Backend,
    fe_port: PortId,
    be_port: PortId,
    wakes: BTreeSet<SimTime>,
    csr_accepts: Vec<SimTime>,
    pending_irqs: Vec<u64>,
    irq_log: Vec<(SimTime, u64)>,
    event_trace: Option<Vec<String>>,
    bounds: BoundCheck,
}

impl std::fmt::Debug for Soc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Soc")
            .field("now", &self.events.now())
            .field("pending_events", &self.events.len())
            .finish()
    }
}

impl Soc {
    pub fn new(config: &DmacConfig, memory: MemoryConfig) -> Result<Self, SocError> {
        config.validate()?;
        memory.validate()?;
        let mut bus = Interconnect::new(memory);
        let fe_port = bus.register_port();
        let be_port = bus.register_port();
        let (engine, backend) = match config {
            DmacConfig::Main { frontend, backend } => (
                Engine::Main(Frontend::new(*frontend, fe_port, memory.data_width)),
                Backend::new(*backend, be_port, frontend.descriptors_in_flight),
            ),
            DmacConfig::Baseline(b) => (
                Engine::Baseline(BaselineFrontend::new(b.clone(), fe_port)),
                Backend::new(b.backend, be_port, b.in_flight),
            ),
        };
        Ok(Soc {
            config: config.clone(),
            mem: Memory::new(memory),
            bus,
            events: EventQueue::new(),
            engine,
            backend,
            fe_port,
            be_port,
            wakes: BTreeSet::new(),
            csr_accepts: Vec::new(),
            pending_irqs: Vec::new(),
            irq_log: Vec::new(),
            event_trace: None,
            bounds: BoundCheck::default(),
        })
    }

    pub fn config(&self) -> &DmacConfig {
        &self.config
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.mem
    }

    pub fn bus(&self) -> &Interconnect {
        &self.bus
    }

    pub fn enable_bus_trace(&mut self) {
        self.bus.enable_trace();
    }

    /// Record every delivered event; used to compare runs for determinism.
    pub fn enable_event_trace(&mut self) {
        self.event_trace.get_or_insert_with(Vec::new);
    }

    pub fn event_trace(&self) -> &[String] {
        self.event_trace.as_deref().unwrap_or(&[])
    }

    pub fn frontend_port(&self) -> PortId {
        self.fe_port
    }

    pub fn backend_port(&self) -> PortId {
        self.be_port
    }

    pub fn frontend(&self) -> Option<&Frontend> {
        match &self.engine {
            Engine::Main(f) => Some(f),
            Engine::Baseline(_) => None,
        }
    }

    pub fn baseline(&self) -> Option<&BaselineFrontend> {
        match &self.engine {
            Engine::Baseline(b) => Some(b),
            Engine::Main(_) => None,
        }
    }

    pub fn fetch_unit(&self) -> &dyn FetchUnit {
        self.engine.unit()
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn bounds(&self) -> BoundCheck {
        self.bounds
    }

    /// Cycles of every accepted CSR write.
    pub fn csr_accepts(&self) -> &[SimTime] {
        &self.csr_accepts
    }

    pub fn irq_log(&self) -> &[(SimTime, u64)] {
        &self.irq_log
    }

    /// Interrupts raised since the last call, as descriptor addresses.
    pub fn take_irqs(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.pending_irqs)
    }

    /// Write the chain head register at the current cycle.
    pub fn csr_write(&mut self, head: u64) -> CsrStatus {
        let now = self.events.now();
        let mut ctx = Ctx {
            now,
            events: &mut self.events,
            bus: &mut self.bus,
        };
        let status = self.engine.unit_mut().csr_write(head, &mut ctx);
        if status == CsrStatus::Accepted {
            self.csr_accepts.push(now);
        }
        status
    }

    /// Register read of the status word: busy flag and CSR queue occupancy.
    pub fn csr_status(&self) -> (bool, usize) {
        match &self.engine {
            Engine::Main(f) => f.status(),
            Engine::Baseline(b) => b.status(),
        }
    }

    /// Nothing left to happen: no events pending.
    pub fn is_done(&self) -> bool {
        self.events.is_empty()
    }

    pub fn probes(&self) -> LatencyProbes {
        let csr = self.csr_accepts.first().copied();
        let req = self.engine.unit().first_request();
        let recv = self.backend.first_receive();
        LatencyProbes {
            i_rf: csr.zip(req).map(|(c, r)| r.0 - c.0),
            rf_rb: req.zip(recv).map(|(r, b)| b.0 - r.0),
            r_w: self.backend.read_to_write(),
        }
    }

    /// Step until no event remains.
    pub fn run_to_idle(&mut self, max_cycles: u64) -> Result<SimTime, SimError> {
        run_until(self, |s| s.is_done(), max_cycles)
    }

    fn owner(&self, port: PortId) -> ComponentId {
        if port == self.fe_port {
            FRONTEND
        } else {
            BACKEND
        }
    }

    fn deliver(&mut self, ev: Event<Msg>) {
        let now = ev.fire_at;
        if let Some(trace) = &mut self.event_trace {
            trace.push(format!(
                "{} {} {} {:?}",
                now.0, ev.seq, ev.target.0, ev.payload
            ));
        }
        let mut ctx = Ctx {
            now,
            events: &mut self.events,
            bus: &mut self.bus,
        };
        match (ev.target, ev.payload) {
            (_, Msg::Wake) => {}
            (
                FRONTEND,
                Msg::ReadBeat {
                    txn,
                    index,
                    data,
                    fault,
                },
            ) => self
                .engine
                .unit_mut()
                .on_read_beat(txn, index, &data, fault, &mut ctx),
            (
                _,
                Msg::ReadBeat {
                    txn,
                    index,
                    data,
                    fault,
                },
            ) => self
                .backend
                .on_read_beat(txn, index, &data, fault, &mut ctx),
            (FRONTEND, Msg::WriteAck { txn, .. }) => {
                self.engine.unit_mut().on_write_ack(txn, &mut ctx)
            }
            (_, Msg::WriteAck { txn, fault }) => self.backend.on_write_ack(txn, fault, &mut ctx),
            (_, Msg::Dispatch(record)) => self.backend.dispatch(record, now),
            (_, Msg::WriteData { txn, index }) => self.backend.on_write_data(txn, index, &mut ctx),
            (_, Msg::Irq { descriptor_address }) => {
                self.pending_irqs.push(descriptor_address);
                self.irq_log.push((now, descriptor_address));
            }
        }
    }

    fn settle(&mut self, now: SimTime) {
        let grants = self.bus.arbitrate(now);
        if let Some(txn) = grants.read {
            let cfg = *self.mem.config();
            let len = txn.byte_len();
            let (data, fault) = match self.mem.backdoor_read(txn.address, len as usize) {
                Ok(d) => (d, false),
                Err(_) => (vec![0; len as usize], true),
            };
            let target = self.owner(txn.origin_port);
            let bpb = txn.bytes_per_beat as usize;
            for (i, at) in crate::mem::read_beat_cycles(&cfg, now, txn.beats)
                .into_iter()
                .enumerate()
            {
                self.events.schedule(
                    at,
                    target,
                    Msg::ReadBeat {
                        txn: txn.id,
                        index: i as u32,
                        data: data[i * bpb..(i + 1) * bpb].to_vec(),
                        fault,
                    },
                );
            }
        }
        if let Some(beat) = self.bus.absorb(now, &mut self.mem) {
            self.backend.on_beat_absorbed(&beat);
            if let Some((ack, fault)) = beat.completion {
                let target = self.owner(beat.port);
                self.events.schedule(
                    ack,
                    target,
                    Msg::WriteAck {
                        txn: beat.txn,
                        fault,
                    },
                );
            }
        }

        let mut ctx = Ctx {
            now,
            events: &mut self.events,
            bus: &mut self.bus,
        };
        let started = self.backend.tick(&mut ctx);
        let unit = self.engine.unit_mut();
        for _ in 0..started {
            unit.release_credit();
        }
        for record in self.backend.take_done() {
            unit.on_backend_done(&record, &mut ctx);
        }
        unit.tick(&mut ctx);
        self.check_bounds();
    }

    fn check_bounds(&mut self) {
        let unit = self.engine.unit();
        let credits = unit.credits_in_use();
        let spec = unit.spec_outstanding();
        let reads = unit.live_fetches();
        let b = &mut self.bounds;
        b.max_credits = b.max_credits.max(credits);
        b.max_speculative = b.max_speculative.max(spec);
        b.max_descriptor_reads = b.max_descriptor_reads.max(reads);
        let read_limit = match &self.config {
            DmacConfig::Main { .. } => self.config.descriptors_in_flight(),
            DmacConfig::Baseline(_) => 1,
        };
        if credits > self.config.descriptors_in_flight()
            || spec > self.config.prefetch_slots()
            || reads > read_limit
        {
            b.violations += 1;
        }
    }

    fn schedule_wake(&mut self, at: SimTime) {
        if self.wakes.insert(at) {
            self.events.schedule(at, BUS, Msg::Wake);
        }
    }

    fn plan_wakes(&mut self, now: SimTime) {
        let next = now.after(1);
        let mut wake = self.bus.next_wake(now);
        if self.backend.wants_tick() || self.engine.unit().wants_tick(now) {
            wake = Some(next);
        }
        if let Some(at) = wake {
            // an event already due before `at` will re-plan anyway
            if self.events.peek_time().is_none_or(|t| t > at) {
                self.schedule_wake(at);
            }
        }
    }
}

impl Simulation for Soc {
    fn now(&self) -> SimTime {
        self.events.now()
    }

    fn step(&mut self) -> Option<SimTime> {
        let t = self.events.peek_time()?;
        self.events.advance_to(t);
        self.wakes.remove(&t);
        while let Some(ev) = self.events.pop_at(t) {
            self.deliver(ev);
        }
        self.settle(t);
        // interrupts raised during settling fire this same cycle
        while let Some(ev) = self.events.pop_at(t) {
            self.deliver(ev);
        }
        self.plan_wakes(t);
        Some(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_by_name() {
        for (name, d, s) in [
            ("base", 4, 0),
            ("speculation", 4, 4),
            ("scaled", 24, 24),
            ("baseline", 4, 0),
        ] {
            let c = DmacConfig::named(name).unwrap();
            assert_eq!(
                (c.descriptors_in_flight(), c.prefetch_slots()),
                (d, s),
                "{name}"
            );
            c.validate().unwrap();
        }
        assert!(DmacConfig::named("turbo").is_none());
    }

    #[test]
    fn invalid_config_refused() {
        let cfg = DmacConfig::Main {
            frontend: FrontendConfig {
                csr_queue_depth: 0,
                ..FrontendConfig::base()
            },
            backend: BackendConfig::default(),
        };
        assert_eq!(
            Soc::new(&cfg, MemoryConfig::default()).err(),
            Some(SocError::Config(ConfigError::NoCsrQueue))
        );
    }

    #[test]
    fn fresh_system_is_idle() {
        for name in ["base", "baseline"] {
            let mut soc =
                Soc::new(&DmacConfig::named(name).unwrap(), MemoryConfig::default()).unwrap();
            assert!(soc.is_done());
            assert_eq!(soc.csr_status(), (false, 0));
            assert_eq!(soc.run_to_idle(10), Ok(SimTime(0)));
            assert_eq!(soc.bounds().violations, 0);
            assert!(soc.irq_log().is_empty());
        }
    }

    #[test]
    fn ports_are_distinct() {
        let soc = Soc::new(&DmacConfig::base(), MemoryConfig::default()).unwrap();
        assert_ne!(soc.frontend_port(), soc.backend_port());
        assert_eq!(soc.bus().port_count(), 2);
    }
}
