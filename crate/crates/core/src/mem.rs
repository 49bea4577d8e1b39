//! Simulated main memory: fixed one-way latency, one data beat per cycle per
//! direction, and a zero-time backdoor for preloading and inspection.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

pub const VALID_DATA_WIDTHS: [u32; 6] = [16, 32, 64, 128, 256, 512];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("access of {len} bytes at {addr:#x} exceeds capacity {capacity:#x}")]
    OutOfBounds { addr: u64, len: u64, capacity: u64 },
    #[error("data width {0} is not one of 16, 32, 64, 128, 256, 512 bits")]
    DataWidth(u32),
    #[error("one-way latency must be at least 1 cycle")]
    ZeroLatency,
    #[error("bus transaction needs at least one beat")]
    ZeroBeats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Cycles charged on each traversal of the memory path.
    pub one_way_latency: u64,
    pub data_width: u32,
    pub capacity: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            one_way_latency: 1,
            data_width: 64,
            capacity: 1 << 32,
        }
    }
}

impl MemoryConfig {
    pub fn with_latency(one_way_latency: u64) -> Self {
        MemoryConfig {
            one_way_latency,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MemError> {
        if !VALID_DATA_WIDTHS.contains(&self.data_width) {
            return Err(MemError::DataWidth(self.data_width));
        }
        if self.one_way_latency == 0 {
            return Err(MemError::ZeroLatency);
        }
        Ok(())
    }

    pub fn bytes_per_beat(&self) -> usize {
        self.data_width as usize / 8
    }

    /// Cycles from grant to the last data beat of an `beats`-beat read.
    pub fn read_round_trip(&self, beats: u32) -> u64 {
        2 * self.one_way_latency + beats as u64
    }
}

/// Read access to simulated memory without timing.
pub trait MemoryView {
    fn read_bytes(&self, addr: u64, len: usize) -> Result<Vec<u8>, MemError>;
}

/// Sparse byte-addressable storage. Untouched bytes read as zero.
#[derive(Clone, Debug)]
pub struct Memory {
    config: MemoryConfig,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new(config: MemoryConfig) -> Self {
        Memory {
            config,
            pages: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn check_range(&self, addr: u64, len: u64) -> Result<(), MemError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.config.capacity => Ok(()),
            _ => Err(MemError::OutOfBounds {
                addr,
                len,
                capacity: self.config.capacity,
            }),
        }
    }

    pub fn backdoor_write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemError> {
        self.check_range(addr, bytes.len() as u64)?;
        let mut cur = addr;
        let mut rest = bytes;
        while !rest.is_empty() {
            let off = (cur as usize) & (PAGE_SIZE - 1);
            let n = rest.len().min(PAGE_SIZE - off);
            let page = self
                .pages
                .entry(cur >> PAGE_BITS)
                .or_insert_with(|| Box::new([0u8; PAGE_SIZE]));
            page[off..off + n].copy_from_slice(&rest[..n]);
            cur += n as u64;
            rest = &rest[n..];
        }
        Ok(())
    }

    pub fn backdoor_read(&self, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        self.check_range(addr, len as u64)?;
        let mut out = vec![0u8; len];
        let mut cur = addr;
        let mut filled = 0;
        while filled < len {
            let off = (cur as usize) & (PAGE_SIZE - 1);
            let n = (len - filled).min(PAGE_SIZE - off);
            if let Some(page) = self.pages.get(&(cur >> PAGE_BITS)) {
                out[filled..filled + n].copy_from_slice(&page[off..off + n]);
            }
            cur += n as u64;
            filled += n;
        }
        Ok(out)
    }

    /// Dump `[base, base+len)` as `base (u64 LE) | len (u64 LE) | bytes`.
    pub fn dump_image<W: Write>(&self, base: u64, len: usize, mut w: W) -> io::Result<()> {
        let bytes = self
            .backdoor_read(base, len)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        w.write_all(&base.to_le_bytes())?;
        w.write_all(&(len as u64).to_le_bytes())?;
        w.write_all(&bytes)
    }

    /// Load an image written by [`Memory::dump_image`]. Returns `(base, len)`.
    pub fn load_image<R: Read>(&mut self, mut r: R) -> io::Result<(u64, usize)> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let base = u64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word) as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        self.backdoor_write(base, &bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Ok((base, len))
    }
}

impl MemoryView for Memory {
    fn read_bytes(&self, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        self.backdoor_read(addr, len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Read,
    Write,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Read => "read",
            Direction::Write => "write",
        }
    }
}

/// What a transaction carries. Fixed when the transaction is created.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficClass {
    /// Architectural descriptor fetch.
    Descriptor,
    /// Descriptor fetch issued on a sequential guess; counted as wasted if
    /// the guess is later discarded.
    Speculative,
    Payload,
    /// Completion marker written over a finished descriptor.
    Writeback,
}

impl TrafficClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TrafficClass::Descriptor => "descriptor",
            TrafficClass::Speculative => "speculative",
            TrafficClass::Payload => "payload",
            TrafficClass::Writeback => "writeback",
        }
    }
}

pub type PortId = usize;
pub type TxnId = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BusTransaction {
    pub id: TxnId,
    pub kind: Direction,
    /// Address of the first beat, aligned down to the beat size.
    pub address: u64,
    pub beats: u32,
    pub bytes_per_beat: u32,
    pub class: TrafficClass,
    pub origin_port: PortId,
    pub issue_cycle: SimTime,
}

impl BusTransaction {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: TxnId,
        kind: Direction,
        address: u64,
        beats: u32,
        bytes_per_beat: u32,
        class: TrafficClass,
        origin_port: PortId,
        issue_cycle: SimTime,
    ) -> Result<Self, MemError> {
        if beats == 0 {
            return Err(MemError::ZeroBeats);
        }
        Ok(BusTransaction {
            id,
            kind,
            address,
            beats,
            bytes_per_beat,
            class,
            origin_port,
            issue_cycle,
        })
    }

    pub fn byte_len(&self) -> u64 {
        self.beats as u64 * self.bytes_per_beat as u64
    }
}

/// Response timing of a granted transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServiceTiming {
    /// Cycle of each returned data beat.
    Read { beat_cycles: Vec<SimTime> },
    /// Cycle the acknowledgment is returned, given the last absorbed beat.
    Write { ack: SimTime },
}

/// Read beats: the first returns `2L` after the grant, then one per cycle.
pub fn read_beat_cycles(cfg: &MemoryConfig, grant: SimTime, beats: u32) -> Vec<SimTime> {
    let first = grant.after(2 * cfg.one_way_latency);
    (0..beats as u64).map(|i| first.after(i)).collect()
}

/// Write acknowledgment: `2L` after the last data beat is absorbed.
pub fn write_ack_cycle(cfg: &MemoryConfig, last_beat: SimTime) -> SimTime {
    last_beat.after(2 * cfg.one_way_latency)
}

/// Timing of `txn` granted at `grant`. For writes the data beats are assumed
/// to stream one per cycle from the grant.
pub fn service(cfg: &MemoryConfig, txn: &BusTransaction, grant: SimTime) -> ServiceTiming {
    match txn.kind {
        Direction::Read => ServiceTiming::Read {
            beat_cycles: read_beat_cycles(cfg, grant, txn.beats),
        },
        Direction::Write => ServiceTiming::Write {
            ack: write_ack_cycle(cfg, grant.after(txn.beats as u64 - 1)),
        },
    }
}
