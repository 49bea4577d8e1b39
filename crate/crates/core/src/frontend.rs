//! Descriptor frontend: CSR launch queue, descriptor fetch with sequential
//! speculation, hand-off to the backend, and completion feedback.
//!
//! Credit accounting: every issued descriptor fetch takes one of `d` credits.
//! The credit returns when the fetch is discarded or when the backend starts
//! executing the transfer the descriptor describes. Speculative fetches
//! additionally hold one of `s` speculation slots until they are committed or
//! discarded.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    next_field, Descriptor, DESCRIPTOR_ALIGN, DESCRIPTOR_BYTES, END_OF_CHAIN, NEXT_OFFSET,
};
use crate::mem::{Direction, PortId, TrafficClass, TxnId};
use crate::sim::SimTime;
use crate::soc::{Ctx, Msg, BACKEND, FRONTEND, HOST};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("descriptors in flight must be at least 1")]
    NoDescriptorsInFlight,
    #[error("CSR queue depth must be at least 1")]
    NoCsrQueue,
    #[error("max burst length must be between 1 and 256 beats")]
    BurstLength,
    #[error("read-to-write latency must be at least 1 cycle")]
    ReadToWrite,
    #[error("at least one outstanding burst per direction is required")]
    Outstanding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub descriptors_in_flight: usize,
    /// Speculative fetches allowed ahead of the architectural one; 0 disables.
    pub prefetch_slots: usize,
    pub csr_queue_depth: usize,
    /// CSR acceptance to first descriptor read request.
    pub csr_to_request: u64,
    /// Cycles after the descriptor register stage before the backend sees the transfer.
    pub decode_to_backend: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl FrontendConfig {
    pub fn base() -> Self {
        FrontendConfig {
            descriptors_in_flight: 4,
            prefetch_slots: 0,
            csr_queue_depth: 4,
            csr_to_request: 3,
            decode_to_backend: 1,
        }
    }

    pub fn speculation() -> Self {
        FrontendConfig {
            prefetch_slots: 4,
            ..Self::base()
        }
    }

    pub fn scaled() -> Self {
        FrontendConfig {
            descriptors_in_flight: 24,
            prefetch_slots: 24,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.descriptors_in_flight == 0 {
            return Err(ConfigError::NoDescriptorsInFlight);
        }
        if self.csr_queue_depth == 0 {
            return Err(ConfigError::NoCsrQueue);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsrStatus {
    Accepted,
    Busy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    Outstanding,
    Committed,
    Discarded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeculationSlot {
    pub predicted_address: u64,
    pub state: SlotState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordState {
    Fetched,
    Dispatched,
    Done,
}

/// A decoded descriptor travelling from the frontend to the backend and back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferRecord {
    pub descriptor_address: u64,
    pub descriptor: Descriptor,
    pub state: RecordState,
    pub completion_cycle: Option<SimTime>,
    /// Position in dispatch order across all chains.
    pub seq: u64,
    pub failed: bool,
}

impl TransferRecord {
    pub fn advance(&mut self, to: RecordState) {
        let rank = |s: RecordState| match s {
            RecordState::Fetched => 0,
            RecordState::Dispatched => 1,
            RecordState::Done => 2,
        };
        assert!(rank(to) > rank(self.state), "record state must advance");
        self.state = to;
    }
}

/// One architectural descriptor fetch: a chain head, a serial fetch after the
/// predecessor's `next` was seen, or a refetch after a misprediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchFetch {
    pub address: u64,
    /// Cycle the predecessor's `next` field arrived; `None` for chain heads.
    pub next_known_at: Option<SimTime>,
    pub issued_at: SimTime,
    pub mispredicted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrontendStats {
    pub hits: u64,
    pub misses: u64,
    pub discarded_fetches: u64,
    pub wasted_beats: u64,
    pub faults: u64,
    pub max_live_fetches: usize,
    pub max_spec_outstanding: usize,
    pub irqs: u64,
    pub writebacks: u64,
    pub chains_finished: u64,
}

#[derive(Debug)]
struct CsrEntry {
    head: u64,
    ready_at: SimTime,
}

#[derive(Debug)]
struct ChainFetch {
    /// Architectural address waiting for a credit, with the cycle it became known.
    pending_arch: Option<(u64, Option<SimTime>, bool)>,
    spec_cursor: u64,
    speculating: bool,
}

#[derive(Debug)]
struct Fetch {
    addr: u64,
    txn: TxnId,
    speculative: bool,
    buf: [u8; DESCRIPTOR_BYTES],
    beats_seen: u32,
    next_seen_at: Option<SimTime>,
    next_handled: bool,
    fault: bool,
}

#[derive(Debug)]
struct Writeback {
    descriptor_address: u64,
    irq: bool,
}

#[derive(Debug)]
pub struct Frontend {
    cfg: FrontendConfig,
    port: PortId,
    bytes_per_beat: usize,
    csr: VecDeque<CsrEntry>,
    chain: Option<ChainFetch>,
    fetches: VecDeque<Fetch>,
    discarded: HashSet<TxnId>,
    /// Faulted architectural fetches whose remaining beats are ignored.
    dropped: HashSet<TxnId>,
    credits_in_use: usize,
    spec_outstanding: usize,
    read_issued_at: Option<SimTime>,
    writebacks: HashMap<TxnId, Writeback>,
    next_seq: u64,
    dispatched: u64,
    stats: FrontendStats,
    arch_log: Vec<ArchFetch>,
    spec_log: Vec<(u64, SimTime)>,
    first_request: Option<SimTime>,
    completed: Vec<(u64, SimTime)>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig, port: PortId, data_width_bits: u32) -> Self {
        Frontend {
            cfg,
            port,
            bytes_per_beat: data_width_bits as usize / 8,
            csr: VecDeque::new(),
            chain: None,
            fetches: VecDeque::new(),
            discarded: HashSet::new(),
            dropped: HashSet::new(),
            credits_in_use: 0,
            spec_outstanding: 0,
            read_issued_at: None,
            writebacks: HashMap::new(),
            next_seq: 0,
            dispatched: 0,
            stats: FrontendStats::default(),
            arch_log: Vec::new(),
            spec_log: Vec::new(),
            first_request: None,
            completed: Vec::new(),
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &FrontendStats {
        &self.stats
    }

    pub fn arch_fetches(&self) -> &[ArchFetch] {
        &self.arch_log
    }

    /// `(address, issue cycle)` of every speculative fetch.
    pub fn speculative_fetches(&self) -> &[(u64, SimTime)] {
        &self.spec_log
    }

    pub fn first_request(&self) -> Option<SimTime> {
        self.first_request
    }

    /// Descriptor addresses whose completion marker was acknowledged, in order.
    pub fn completed(&self) -> &[(u64, SimTime)] {
        &self.completed
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn live_fetches(&self) -> usize {
        self.fetches.len()
    }

    pub fn spec_outstanding(&self) -> usize {
        self.spec_outstanding
    }

    pub fn credits_in_use(&self) -> usize {
        self.credits_in_use
    }

    /// Register read of the status CSR: busy flag and queue occupancy.
    pub fn status(&self) -> (bool, usize) {
        (!self.is_idle(), self.csr.len())
    }

    pub fn is_idle(&self) -> bool {
        self.csr.is_empty()
            && self.chain.is_none()
            && self.fetches.is_empty()
            && self.writebacks.is_empty()
            && self.credits_in_use == 0
    }

    pub fn csr_write(&mut self, head: u64, ctx: &mut Ctx) -> CsrStatus {
        if self.csr.len() >= self.cfg.csr_queue_depth {
            return CsrStatus::Busy;
        }
        let ready_at = ctx.now.after(self.cfg.csr_to_request);
        self.csr.push_back(CsrEntry { head, ready_at });
        ctx.events.schedule(ready_at, FRONTEND, Msg::Wake);
        CsrStatus::Accepted
    }

    /// The backend started executing a transfer: its credit comes back.
    pub fn release_credit(&mut self) {
        assert!(self.credits_in_use > 0, "credit released twice");
        self.credits_in_use -= 1;
    }

    fn can_issue_read(&self, now: SimTime) -> bool {
        self.read_issued_at != Some(now) && self.credits_in_use < self.cfg.descriptors_in_flight
    }

    fn descriptor_beats(&self) -> u32 {
        (DESCRIPTOR_BYTES / self.bytes_per_beat).max(1) as u32
    }

    fn beat_base(&self, addr: u64) -> u64 {
        addr - addr % self.bytes_per_beat.max(DESCRIPTOR_BYTES) as u64
    }

    fn issue_fetch(&mut self, addr: u64, speculative: bool, ctx: &mut Ctx) {
        let class = if speculative {
            TrafficClass::Speculative
        } else {
            TrafficClass::Descriptor
        };
        let beats = self.descriptor_beats();
        let txn = ctx
            .bus
            .request(
                self.port,
                Direction::Read,
                self.beat_base(addr),
                beats,
                self.bytes_per_beat as u32,
                class,
                ctx.now,
            )
            .expect("frontend port registered");
        self.read_issued_at = Some(ctx.now);
        self.credits_in_use += 1;
        if speculative {
            self.spec_outstanding += 1;
            self.spec_log.push((addr, ctx.now));
        }
        self.first_request.get_or_insert(ctx.now);
        self.fetches.push_back(Fetch {
            addr,
            txn,
            speculative,
            buf: [0; DESCRIPTOR_BYTES],
            beats_seen: 0,
            next_seen_at: None,
            next_handled: false,
            fault: false,
        });
        self.stats.max_live_fetches = self.stats.max_live_fetches.max(self.fetches.len());
        self.stats.max_spec_outstanding =
            self.stats.max_spec_outstanding.max(self.spec_outstanding);
    }

    fn try_issue_arch(&mut self, ctx: &mut Ctx) -> bool {
        let Some(chain) = &self.chain else {
            return false;
        };
        let Some((addr, known_at, mispredicted)) = chain.pending_arch else {
            return false;
        };
        if !self.can_issue_read(ctx.now) {
            return false;
        }
        self.issue_fetch(addr, false, ctx);
        self.arch_log.push(ArchFetch {
            address: addr,
            next_known_at: known_at,
            issued_at: ctx.now,
            mispredicted,
        });
        let chain = self.chain.as_mut().unwrap();
        chain.pending_arch = None;
        chain.spec_cursor = addr;
        true
    }

    /// Per-cycle issue: start the next chain, the architectural fetch, or one
    /// speculative fetch at the next sequential address.
    pub fn tick(&mut self, ctx: &mut Ctx) {
        if self.chain.is_none() {
            if let Some(entry) = self.csr.pop_front_if(|e| e.ready_at <= ctx.now) {
                let head = entry.head;
                self.chain = Some(ChainFetch {
                    pending_arch: Some((head, None, false)),
                    spec_cursor: head,
                    speculating: self.cfg.prefetch_slots > 0,
                });
            }
        }
        if self.try_issue_arch(ctx) {
            return;
        }
        let Some(chain) = &self.chain else {
            return;
        };
        if chain.pending_arch.is_none()
            && chain.speculating
            && self.spec_outstanding < self.cfg.prefetch_slots
            && self.can_issue_read(ctx.now)
        {
            let Some(addr) = chain.spec_cursor.checked_add(DESCRIPTOR_ALIGN) else {
                return;
            };
            if addr == END_OF_CHAIN - (DESCRIPTOR_ALIGN - 1) {
                return;
            }
            self.chain.as_mut().unwrap().spec_cursor = addr;
            self.issue_fetch(addr, true, ctx);
        }
    }

    /// Whether [`Frontend::tick`] could make progress on the next cycle
    /// without any event arriving first.
    pub fn wants_tick(&self, now: SimTime) -> bool {
        let credit = self.credits_in_use < self.cfg.descriptors_in_flight;
        match &self.chain {
            None => self.csr.front().is_some_and(|e| e.ready_at <= now.after(1)),
            Some(c) => {
                credit
                    && (c.pending_arch.is_some()
                        || (c.speculating && self.spec_outstanding < self.cfg.prefetch_slots))
            }
        }
    }

    fn discard_speculation(&mut self) {
        let mut kept = VecDeque::with_capacity(self.fetches.len());
        for f in self.fetches.drain(..) {
            if f.speculative {
                self.discarded.insert(f.txn);
                self.stats.discarded_fetches += 1;
                self.credits_in_use -= 1;
                self.spec_outstanding -= 1;
                // beats already received before the discard were wasted as well
                self.stats.wasted_beats += f.beats_seen as u64;
            } else {
                kept.push_back(f);
            }
        }
        self.fetches = kept;
    }

    fn end_chain(&mut self, fault: bool) {
        self.discard_speculation();
        if fault {
            self.stats.faults += 1;
        }
        self.chain = None;
        self.stats.chains_finished += 1;
    }

    /// The `next` field of the architectural descriptor at `addr` arrived.
    fn on_next(&mut self, addr: u64, next: u64, ctx: &mut Ctx) {
        if self.chain.is_none() {
            return;
        }
        if next == END_OF_CHAIN {
            self.end_chain(false);
            return;
        }
        let bad_link = !next.is_multiple_of(DESCRIPTOR_ALIGN)
            || (addr..addr + DESCRIPTOR_ALIGN).contains(&next);
        if bad_link {
            self.end_chain(true);
            return;
        }
        let oldest_spec = self.fetches.iter().position(|f| f.speculative);
        match oldest_spec {
            Some(i) if self.fetches[i].addr == next => {
                self.fetches[i].speculative = false;
                self.spec_outstanding -= 1;
                self.stats.hits += 1;
                // its data may already be complete; the fetch is now architectural
                let txn = self.fetches[i].txn;
                self.process_ready(txn, ctx);
            }
            other => {
                let mispredicted = other.is_some();
                if mispredicted {
                    self.stats.misses += 1;
                    self.discard_speculation();
                }
                let chain = self.chain.as_mut().unwrap();
                chain.pending_arch = Some((next, Some(ctx.now), mispredicted));
                chain.spec_cursor = next;
                self.try_issue_arch(ctx);
            }
        }
    }

    fn position(&self, txn: TxnId) -> Option<usize> {
        self.fetches.iter().position(|f| f.txn == txn)
    }

    /// Act on whatever the fetch `txn` already holds, once it is architectural.
    fn process_ready(&mut self, txn: TxnId, ctx: &mut Ctx) {
        let Some(i) = self.position(txn) else {
            return;
        };
        if self.fetches[i].speculative {
            return;
        }
        if self.fetches[i].fault {
            let f = self.fetches.remove(i).unwrap();
            if f.beats_seen < self.descriptor_beats() {
                self.dropped.insert(f.txn);
            }
            self.credits_in_use -= 1;
            if self.chain.is_some() {
                self.end_chain(true);
            }
            return;
        }
        let f = &self.fetches[i];
        if f.next_seen_at.is_some() && !f.next_handled {
            let addr = f.addr;
            let next = next_field(&f.buf).expect("next field present");
            self.fetches[i].next_handled = true;
            self.on_next(addr, next, ctx);
        }
        let Some(i) = self.position(txn) else {
            return;
        };
        let f = &self.fetches[i];
        if f.beats_seen < self.descriptor_beats() || !f.next_handled {
            return;
        }
        debug_assert!(
            self.fetches.iter().take(i).all(|x| x.speculative),
            "descriptors complete in chain order"
        );
        let f = self.fetches.remove(i).unwrap();
        let descriptor = Descriptor::decode(&f.buf).expect("32-byte buffer");
        let record = TransferRecord {
            descriptor_address: f.addr,
            descriptor,
            state: RecordState::Dispatched,
            completion_cycle: None,
            seq: self.next_seq,
            failed: false,
        };
        self.next_seq += 1;
        self.dispatched += 1;
        let at = ctx.now.after(1 + self.cfg.decode_to_backend);
        ctx.events.schedule(at, BACKEND, Msg::Dispatch(record));
    }

    pub fn on_read_beat(
        &mut self,
        txn: TxnId,
        index: u32,
        data: &[u8],
        fault: bool,
        ctx: &mut Ctx,
    ) {
        if self.discarded.contains(&txn) {
            self.stats.wasted_beats += 1;
            if index + 1 == self.descriptor_beats() {
                self.discarded.remove(&txn);
            }
            return;
        }
        if self.dropped.contains(&txn) {
            if index + 1 == self.descriptor_beats() {
                self.dropped.remove(&txn);
            }
            return;
        }
        let Some(i) = self.position(txn) else {
            return;
        };
        let bpb = self.bytes_per_beat;
        let f = &mut self.fetches[i];
        f.beats_seen += 1;
        f.fault |= fault;
        // bytes of this beat that belong to the descriptor
        let beat_start = index as usize * bpb;
        let desc_offset = (f.addr % bpb.max(DESCRIPTOR_BYTES) as u64) as usize;
        for (k, byte) in data.iter().enumerate() {
            let pos = beat_start + k;
            if pos >= desc_offset && pos < desc_offset + DESCRIPTOR_BYTES {
                f.buf[pos - desc_offset] = *byte;
            }
        }
        let received = beat_start + bpb;
        if f.next_seen_at.is_none() && received >= desc_offset + NEXT_OFFSET + 8 {
            f.next_seen_at = Some(ctx.now);
        }
        self.process_ready(txn, ctx);
    }

    /// The backend finished a transfer: write the completion marker.
    pub fn on_backend_done(&mut self, record: &TransferRecord, ctx: &mut Ctx) {
        if record.failed {
            return;
        }
        let bpb = self.bytes_per_beat as u64;
        let addr = record.descriptor_address;
        let base = addr - addr % bpb;
        let beats = (addr + 8 - base).div_ceil(bpb) as u32;
        let txn = ctx
            .bus
            .request(
                self.port,
                Direction::Write,
                base,
                beats,
                bpb as u32,
                TrafficClass::Writeback,
                ctx.now,
            )
            .expect("frontend port registered");
        let mut cursor = addr;
        for b in 0..beats {
            let beat_end = base + (b as u64 + 1) * bpb;
            let end = beat_end.min(addr + 8);
            let len = end.saturating_sub(cursor) as usize;
            ctx.bus
                .push_write_beat(txn, b, cursor, vec![0xFF; len])
                .expect("write registered");
            cursor = end;
        }
        self.stats.writebacks += 1;
        self.writebacks.insert(
            txn,
            Writeback {
                descriptor_address: addr,
                irq: record.descriptor.config.irq_on_completion(),
            },
        );
    }

    pub fn on_write_ack(&mut self, txn: TxnId, ctx: &mut Ctx) {
        let Some(wb) = self.writebacks.remove(&txn) else {
            return;
        };
        self.completed.push((wb.descriptor_address, ctx.now));
        if wb.irq {
            self.stats.irqs += 1;
            ctx.events.schedule(
                ctx.now,
                HOST,
                Msg::Irq {
                    descriptor_address: wb.descriptor_address,
                },
            );
        }
    }
}
