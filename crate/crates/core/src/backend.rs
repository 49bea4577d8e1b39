//! Payload engine: splits each transfer into bursts, streams read beats back
//! out as write beats, and reports completions in dispatch order.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::frontend::{ConfigError, RecordState, TransferRecord};
use crate::interconnect::AbsorbedBeat;
use crate::mem::{Direction, PortId, TrafficClass, TxnId};
use crate::sim::SimTime;
use crate::soc::{Ctx, Msg, BACKEND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub data_width: u32,
    pub max_burst_beats: u32,
    pub read_to_write_latency: u64,
    /// Bursts allowed in flight per direction.
    pub max_outstanding: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            data_width: 64,
            max_burst_beats: 256,
            read_to_write_latency: 1,
            max_outstanding: 8,
        }
    }
}

impl BackendConfig {
    pub fn with_outstanding(max_outstanding: usize) -> Self {
        BackendConfig {
            max_outstanding,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=256).contains(&self.max_burst_beats) {
            return Err(ConfigError::BurstLength);
        }
        if self.read_to_write_latency == 0 {
            return Err(ConfigError::ReadToWrite);
        }
        if self.max_outstanding == 0 {
            return Err(ConfigError::Outstanding);
        }
        Ok(())
    }

    pub fn bytes_per_beat(&self) -> u64 {
        self.data_width as u64 / 8
    }
}

/// Beats needed to cover `length` bytes starting at `address` on a bus of
/// `bytes_per_beat`.
pub fn span_beats(address: u64, length: u64, bytes_per_beat: u64) -> u64 {
    if length == 0 {
        return 0;
    }
    ((address % bytes_per_beat) + length).div_ceil(bytes_per_beat)
}

/// Length of the next burst so neither its read nor its write side exceeds
/// `max_beats`.
pub fn chunk_len(src: u64, dst: u64, remaining: u64, bytes_per_beat: u64, max_beats: u32) -> u64 {
    let cap = max_beats as u64 * bytes_per_beat;
    remaining
        .min(cap - src % bytes_per_beat)
        .min(cap - dst % bytes_per_beat)
}

/// Cursor state of the transfer currently being split into bursts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InFlightTransfer {
    pub source: u64,
    pub destination: u64,
    pub bytes_remaining: u64,
    pub record: TransferRecord,
}

#[derive(Debug)]
struct Chunk {
    active: u64,
    src: u64,
    dst: u64,
    len: u64,
    write_txn: TxnId,
    buf: Vec<u8>,
    read_beats: u32,
    read_cycles: Vec<SimTime>,
    /// For each write beat, the read beat that completes its data.
    ready_after: Vec<u32>,
    read_fault: bool,
}

#[derive(Debug)]
struct Active {
    id: u64,
    record: TransferRecord,
    issuing: bool,
    acks_pending: u32,
    failed: bool,
}

/// First and last payload read beat of one transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PayloadSpan {
    pub seq: u64,
    pub first: SimTime,
    pub last: SimTime,
}

#[derive(Debug)]
pub struct Backend {
    cfg: BackendConfig,
    port: PortId,
    capacity: usize,
    queue: VecDeque<TransferRecord>,
    current: Option<InFlightTransfer>,
    active: VecDeque<Active>,
    next_active: u64,
    chunks: HashMap<u64, Chunk>,
    by_read: HashMap<TxnId, u64>,
    by_write: HashMap<TxnId, u64>,
    next_chunk: u64,
    reads_out: usize,
    writes_out: usize,
    issued_at: Option<SimTime>,
    done: Vec<TransferRecord>,
    payload_read_beats: Vec<SimTime>,
    spans: HashMap<u64, PayloadSpan>,
    first_receive: Option<SimTime>,
    r_w: Option<u64>,
    max_reads_out: usize,
    dispatch_order: Vec<u64>,
}

impl Backend {
    /// `capacity` bounds the dispatch queue.
    pub fn new(cfg: BackendConfig, port: PortId, capacity: usize) -> Self {
        Backend {
            cfg,
            port,
            capacity,
            queue: VecDeque::new(),
            current: None,
            active: VecDeque::new(),
            next_active: 0,
            chunks: HashMap::new(),
            by_read: HashMap::new(),
            by_write: HashMap::new(),
            next_chunk: 0,
            reads_out: 0,
            writes_out: 0,
            issued_at: None,
            done: Vec::new(),
            payload_read_beats: Vec::new(),
            spans: HashMap::new(),
            first_receive: None,
            r_w: None,
            max_reads_out: 0,
            dispatch_order: Vec::new(),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.current.is_none() && self.active.is_empty()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn first_receive(&self) -> Option<SimTime> {
        self.first_receive
    }

    pub fn read_to_write(&self) -> Option<u64> {
        self.r_w
    }

    pub fn payload_read_beats(&self) -> &[SimTime] {
        &self.payload_read_beats
    }

    pub fn payload_span(&self, seq: u64) -> Option<PayloadSpan> {
        self.spans.get(&seq).copied()
    }

    pub fn max_reads_out(&self) -> usize {
        self.max_reads_out
    }

    /// Sequence numbers in the order the backend received them.
    pub fn dispatch_order(&self) -> &[u64] {
        &self.dispatch_order
    }

    /// Completed records since the last call, in dispatch order.
    pub fn take_done(&mut self) -> Vec<TransferRecord> {
        std::mem::take(&mut self.done)
    }

    pub fn dispatch(&mut self, mut record: TransferRecord, now: SimTime) {
        assert!(
            self.queue.len() < self.capacity,
            "backend queue overflow: credits must prevent this"
        );
        if record.state == RecordState::Fetched {
            record.advance(RecordState::Dispatched);
        }
        self.first_receive.get_or_insert(now);
        self.dispatch_order.push(record.seq);
        self.queue.push_back(record);
    }

    fn start_next(&mut self) -> bool {
        let Some(record) = self.queue.pop_front() else {
            return false;
        };
        let id = self.next_active;
        self.next_active += 1;
        let d = record.descriptor;
        let length = d.length as u64;
        self.active.push_back(Active {
            id,
            record: record.clone(),
            issuing: length > 0,
            acks_pending: 0,
            failed: false,
        });
        if length > 0 {
            self.current = Some(InFlightTransfer {
                source: d.source,
                destination: d.destination,
                bytes_remaining: length,
                record,
            });
        }
        true
    }

    fn issue_chunk(&mut self, ctx: &mut Ctx) {
        let cur = self.current.as_mut().expect("transfer in flight");
        let w = self.cfg.bytes_per_beat();
        let len = chunk_len(
            cur.source,
            cur.destination,
            cur.bytes_remaining,
            w,
            self.cfg.max_burst_beats,
        );
        let (src, dst) = (cur.source, cur.destination);
        let read_beats = span_beats(src, len, w) as u32;
        let write_beats = span_beats(dst, len, w) as u32;
        let read_txn = ctx
            .bus
            .request(
                self.port,
                Direction::Read,
                src - src % w,
                read_beats,
                w as u32,
                TrafficClass::Payload,
                ctx.now,
            )
            .expect("backend port registered");
        let write_txn = ctx
            .bus
            .request(
                self.port,
                Direction::Write,
                dst - dst % w,
                write_beats,
                w as u32,
                TrafficClass::Payload,
                ctx.now,
            )
            .expect("backend port registered");
        let ready_after = (0..write_beats as u64)
            .map(|j| {
                let beat_end = dst - dst % w + (j + 1) * w;
                let last_off = beat_end.min(dst + len) - dst - 1;
                ((src % w + last_off) / w) as u32
            })
            .collect();
        cur.source += len;
        cur.destination += len;
        cur.bytes_remaining -= len;
        let finished = cur.bytes_remaining == 0;

        let active = self.active.back_mut().expect("active transfer");
        active.acks_pending += 1;
        let id = self.next_chunk;
        self.next_chunk += 1;
        self.chunks.insert(
            id,
            Chunk {
                active: active.id,
                src,
                dst,
                len,
                write_txn,
                buf: vec![0; len as usize],
                read_beats,
                read_cycles: Vec::with_capacity(read_beats as usize),
                ready_after,
                read_fault: false,
            },
        );
        self.by_read.insert(read_txn, id);
        self.by_write.insert(write_txn, id);
        self.reads_out += 1;
        self.writes_out += 1;
        self.max_reads_out = self.max_reads_out.max(self.reads_out);
        self.issued_at = Some(ctx.now);
        if finished {
            active.issuing = false;
            self.current = None;
        }
    }

    fn retire(&mut self, now: SimTime) {
        while let Some(front) = self.active.front() {
            if front.issuing || front.acks_pending > 0 {
                break;
            }
            let a = self.active.pop_front().unwrap();
            let mut record = a.record;
            record.advance(RecordState::Done);
            record.completion_cycle = Some(now);
            record.failed = a.failed;
            self.done.push(record);
        }
    }

    /// Per-cycle work. Returns how many transfers left the dispatch queue,
    /// each of which frees one frontend credit.
    pub fn tick(&mut self, ctx: &mut Ctx) -> usize {
        let mut started = 0;
        if self.current.is_none() && self.start_next() {
            started += 1;
        }
        let can_issue = self.current.is_some()
            && self.issued_at != Some(ctx.now)
            && self.reads_out < self.cfg.max_outstanding
            && self.writes_out < self.cfg.max_outstanding;
        if can_issue {
            self.issue_chunk(ctx);
        }
        self.retire(ctx.now);
        started
    }

    pub fn wants_tick(&self) -> bool {
        let limits_ok =
            self.reads_out < self.cfg.max_outstanding && self.writes_out < self.cfg.max_outstanding;
        (self.current.is_some() && limits_ok) || (self.current.is_none() && !self.queue.is_empty())
    }

    pub fn on_read_beat(
        &mut self,
        txn: TxnId,
        index: u32,
        data: &[u8],
        fault: bool,
        ctx: &mut Ctx,
    ) {
        let Some(&cid) = self.by_read.get(&txn) else {
            return;
        };
        let w = self.cfg.bytes_per_beat();
        let r_w = self.cfg.read_to_write_latency;
        let chunk = self.chunks.get_mut(&cid).expect("chunk");
        chunk.read_cycles.push(ctx.now);
        chunk.read_fault |= fault;
        let beat_addr = chunk.src - chunk.src % w + index as u64 * w;
        for (k, byte) in data.iter().enumerate() {
            let a = beat_addr + k as u64;
            if a >= chunk.src && a < chunk.src + chunk.len {
                chunk.buf[(a - chunk.src) as usize] = *byte;
            }
        }
        for (j, &after) in chunk.ready_after.iter().enumerate() {
            if after == index {
                ctx.events.schedule(
                    ctx.now.after(r_w),
                    BACKEND,
                    Msg::WriteData {
                        txn: chunk.write_txn,
                        index: j as u32,
                    },
                );
            }
        }
        let seq = self
            .active
            .iter()
            .find(|a| a.id == chunk.active)
            .map(|a| a.record.seq)
            .expect("chunk belongs to an active transfer");
        self.payload_read_beats.push(ctx.now);
        self.spans
            .entry(seq)
            .and_modify(|s| s.last = ctx.now)
            .or_insert(PayloadSpan {
                seq,
                first: ctx.now,
                last: ctx.now,
            });
        if index + 1 == chunk.read_beats {
            self.reads_out -= 1;
            self.by_read.remove(&txn);
        }
    }

    pub fn on_write_data(&mut self, txn: TxnId, index: u32, ctx: &mut Ctx) {
        let cid = self.by_write[&txn];
        let chunk = &self.chunks[&cid];
        let w = self.cfg.bytes_per_beat();
        let base = chunk.dst - chunk.dst % w + index as u64 * w;
        let start = base.max(chunk.dst);
        let end = (base + w).min(chunk.dst + chunk.len);
        let data = if chunk.read_fault {
            Vec::new()
        } else {
            chunk.buf[(start - chunk.dst) as usize..(end - chunk.dst) as usize].to_vec()
        };
        ctx.bus
            .push_write_beat(txn, index, start, data)
            .expect("write registered");
    }

    pub fn on_beat_absorbed(&mut self, beat: &AbsorbedBeat) {
        if self.r_w.is_some() {
            return;
        }
        let Some(cid) = self.by_write.get(&beat.txn) else {
            return;
        };
        let chunk = &self.chunks[cid];
        let read_idx = chunk.ready_after[beat.index as usize] as usize;
        if let Some(read_at) = chunk.read_cycles.get(read_idx) {
            self.r_w = Some(beat.cycle.0 - read_at.0);
        }
    }

    pub fn on_write_ack(&mut self, txn: TxnId, fault: bool, ctx: &mut Ctx) {
        let Some(cid) = self.by_write.remove(&txn) else {
            return;
        };
        let chunk = self.chunks.remove(&cid).expect("chunk");
        self.writes_out -= 1;
        if let Some(a) = self.active.iter_mut().find(|a| a.id == chunk.active) {
            a.acks_pending -= 1;
            a.failed |= fault || chunk.read_fault;
        }
        self.retire(ctx.now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_four_bytes_is_eight_beats() {
        assert_eq!(span_beats(0x1000, 64, 8), 8);
        assert_eq!(span_beats(0x1004, 64, 8), 9);
        assert_eq!(span_beats(0x1000, 0, 8), 0);
    }

    #[test]
    fn largest_transfer_does_not_overflow() {
        let len = u32::MAX as u64;
        assert_eq!(span_beats(0, len, 8), len.div_ceil(8));
        // split into 2 KiB bursts
        let mut remaining = len;
        let (mut src, mut dst, mut bursts, mut beats) = (0u64, 0u64, 0u64, 0u64);
        while remaining > 0 {
            let l = chunk_len(src, dst, remaining, 8, 256);
            beats += span_beats(src, l, 8);
            src += l;
            dst += l;
            remaining -= l;
            bursts += 1;
        }
        assert_eq!(beats, len.div_ceil(8));
        assert_eq!(bursts, len.div_ceil(2048));
    }

    #[test]
    fn unaligned_chunks_respect_burst_cap() {
        let l = chunk_len(3, 5, 10_000, 8, 256);
        assert!(span_beats(3, l, 8) <= 256);
        assert!(span_beats(5, l, 8) <= 256);
        assert_eq!(l, 2048 - 5);
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let bad = BackendConfig {
            max_burst_beats: 257,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::BurstLength));
        let bad = BackendConfig {
            read_to_write_latency: 0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::ReadToWrite));
    }
}
