//! Host driver model for memcpy offload: prepare descriptors in a memory
//! arena, commit handles into chains, launch chains through the CSR with a
//! cap on concurrently running chains, and complete handles from interrupts.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::descriptor::{ConfigFlags, Descriptor, DESCRIPTOR_BYTES, END_OF_CHAIN, NEXT_OFFSET};
use crate::frontend::CsrStatus;
use crate::mem::MemError;
use crate::sim::{SimError, SimTime, Simulation};
use crate::soc::Soc;

pub type HandleId = usize;

/// Largest length one descriptor carries: 4 GiB rounded down to 8 bytes.
pub const MAX_DESCRIPTOR_LENGTH: u64 = (1 << 32) - 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HandleState {
    Prepared,
    Committed,
    Submitted,
    Completed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferHandle {
    pub descriptors: Vec<u64>,
    pub state: HandleState,
    pub want_irq: bool,
}

pub type Callback = Box<dyn FnOnce(&mut Driver, &mut Soc, HandleId)>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DriverError {
    #[error("descriptor arena exhausted")]
    ArenaExhausted,
    #[error("handle {0} is not in the prepared state")]
    WrongState(HandleId),
    #[error("unknown handle {0}")]
    UnknownHandle(HandleId),
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DriverConfig {
    pub arena_base: u64,
    pub arena_bytes: u64,
    pub max_chains: usize,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            arena_base: 0x0800_0000,
            arena_bytes: 1 << 20,
            max_chains: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DriverStats {
    pub csr_launches: u64,
    pub peak_active: usize,
    pub irqs: u64,
    pub spurious_irqs: u64,
    pub callbacks_run: u64,
    pub chains_retired: u64,
    pub deferred_total: u64,
}

#[derive(Debug)]
struct Chain {
    head: u64,
    handles: Vec<HandleId>,
}

pub struct Driver {
    cfg: DriverConfig,
    cursor: u64,
    free: Vec<u64>,
    handles: Vec<TransferHandle>,
    callbacks: HashMap<HandleId, Callback>,
    committed: VecDeque<Chain>,
    deferred: VecDeque<Chain>,
    active: Vec<Chain>,
    stats: DriverStats,
}

impl std::fmt::Debug for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Driver")
            .field("active", &self.active.len())
            .field("deferred", &self.deferred.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Driver {
    pub fn new(cfg: DriverConfig) -> Self {
        Driver {
            cfg,
            cursor: cfg.arena_base,
            free: Vec::new(),
            handles: Vec::new(),
            callbacks: HashMap::new(),
            committed: VecDeque::new(),
            deferred: VecDeque::new(),
            active: Vec::new(),
            stats: DriverStats::default(),
        }
    }

    pub fn stats(&self) -> &DriverStats {
        &self.stats
    }

    pub fn handle(&self, id: HandleId) -> Option<&TransferHandle> {
        self.handles.get(id)
    }

    pub fn active_chains(&self) -> usize {
        self.active.len()
    }

    pub fn deferred_chains(&self) -> usize {
        self.deferred.len()
    }

    /// Handles prepared so far that have not completed.
    pub fn outstanding(&self) -> usize {
        self.handles
            .iter()
            .filter(|h| h.state != HandleState::Completed)
            .count()
    }

    fn alloc(&mut self, count: usize) -> Result<Vec<u64>, DriverError> {
        let end = self.cfg.arena_base + self.cfg.arena_bytes;
        let bump = ((end - self.cursor) / DESCRIPTOR_BYTES as u64) as usize;
        if bump + self.free.len() < count {
            return Err(DriverError::ArenaExhausted);
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor + DESCRIPTOR_BYTES as u64 <= end {
                out.push(self.cursor);
                self.cursor += DESCRIPTOR_BYTES as u64;
            } else {
                out.push(self.free.pop().unwrap());
            }
        }
        Ok(out)
    }

    fn release(&mut self, addrs: &[u64]) {
        self.free.extend_from_slice(addrs);
        self.free.sort_unstable_by(|a, b| b.cmp(a));
    }

    /// Allocate and fill descriptors for one copy. Lengths above
    /// [`MAX_DESCRIPTOR_LENGTH`] are split across several descriptors.
    pub fn prepare_memcpy(
        &mut self,
        soc: &mut Soc,
        source: u64,
        destination: u64,
        length: u64,
        want_irq: bool,
    ) -> Result<HandleId, DriverError> {
        let mut pieces = Vec::new();
        let mut offset = 0;
        loop {
            let len = (length - offset).min(MAX_DESCRIPTOR_LENGTH);
            pieces.push((offset, len));
            offset += len;
            if offset >= length {
                break;
            }
        }
        let addrs = self.alloc(pieces.len())?;
        for (i, (&(off, len), &addr)) in pieces.iter().zip(&addrs).enumerate() {
            let last = i + 1 == pieces.len();
            let d = Descriptor {
                length: len as u32,
                config: ConfigFlags::with_irq(last && want_irq),
                next: if last { END_OF_CHAIN } else { addrs[i + 1] },
                source: source + off,
                destination: destination + off,
            };
            soc.memory_mut().backdoor_write(addr, &d.encode())?;
        }
        self.handles.push(TransferHandle {
            descriptors: addrs,
            state: HandleState::Prepared,
            want_irq,
        });
        Ok(self.handles.len() - 1)
    }

    pub fn set_callback(&mut self, id: HandleId, cb: Callback) {
        self.callbacks.insert(id, cb);
    }

    /// Splice prepared handles into one chain, in the given order.
    pub fn commit(&mut self, soc: &mut Soc, ids: &[HandleId]) -> Result<(), DriverError> {
        for &id in ids {
            let h = self.handles.get(id).ok_or(DriverError::UnknownHandle(id))?;
            if h.state != HandleState::Prepared {
                return Err(DriverError::WrongState(id));
            }
        }
        let Some(&first) = ids.first() else {
            return Ok(());
        };
        for pair in ids.windows(2) {
            let tail = *self.handles[pair[0]].descriptors.last().unwrap();
            let head = self.handles[pair[1]].descriptors[0];
            let mem = soc.memory_mut();
            mem.backdoor_write(tail + NEXT_OFFSET as u64, &head.to_le_bytes())?;
            // only the final descriptor of a chain may interrupt
            let mut cfg = [0u8; 4];
            cfg.copy_from_slice(&mem.backdoor_read(tail + 4, 4)?);
            let mut flags = ConfigFlags(u32::from_le_bytes(cfg));
            flags.set_irq(false);
            mem.backdoor_write(tail + 4, &flags.0.to_le_bytes())?;
        }
        for &id in ids {
            self.handles[id].state = HandleState::Committed;
        }
        self.committed.push_back(Chain {
            head: self.handles[first].descriptors[0],
            handles: ids.to_vec(),
        });
        Ok(())
    }

    fn launch(&mut self, soc: &mut Soc, chain: Chain) {
        let status = soc.csr_write(chain.head);
        assert_eq!(
            status,
            CsrStatus::Accepted,
            "CSR queue deeper than the chain cap"
        );
        for &id in &chain.handles {
            self.handles[id].state = HandleState::Submitted;
        }
        self.active.push(chain);
        self.stats.csr_launches += 1;
        self.stats.peak_active = self.stats.peak_active.max(self.active.len());
    }

    /// Launch committed chains while under the chain cap; store the rest.
    pub fn issue(&mut self, soc: &mut Soc) {
        while let Some(chain) = self.committed.pop_front() {
            if self.active.len() < self.cfg.max_chains && self.deferred.is_empty() {
                self.launch(soc, chain);
            } else {
                self.stats.deferred_total += 1;
                self.deferred.push_back(chain);
            }
        }
    }

    fn marker_set(soc: &Soc, addr: u64) -> bool {
        soc.memory()
            .backdoor_read(addr, 8)
            .is_ok_and(|b| b.iter().all(|&x| x == 0xFF))
    }

    /// Complete every handle whose final descriptor carries the marker, retire
    /// finished chains and launch stored ones. Returns newly completed handles.
    fn reap(&mut self, soc: &mut Soc) -> usize {
        let mut done = Vec::new();
        for chain in &self.active {
            for &id in &chain.handles {
                let h = &self.handles[id];
                if h.state == HandleState::Submitted
                    && Self::marker_set(soc, *h.descriptors.last().unwrap())
                {
                    done.push(id);
                }
            }
        }
        for &id in &done {
            self.handles[id].state = HandleState::Completed;
        }
        let mut i = 0;
        while i < self.active.len() {
            let finished = self.active[i]
                .handles
                .iter()
                .all(|&id| self.handles[id].state == HandleState::Completed);
            if finished {
                let chain = self.active.remove(i);
                let addrs: Vec<u64> = chain
                    .handles
                    .iter()
                    .flat_map(|&id| self.handles[id].descriptors.clone())
                    .collect();
                self.release(&addrs);
                self.stats.chains_retired += 1;
            } else {
                i += 1;
            }
        }
        while self.active.len() < self.cfg.max_chains {
            let Some(chain) = self.deferred.pop_front() else {
                break;
            };
            self.launch(soc, chain);
        }
        for &id in &done {
            if let Some(cb) = self.callbacks.remove(&id) {
                self.stats.callbacks_run += 1;
                cb(self, soc, id);
            }
        }
        done.len()
    }

    /// Interrupt entry point: drains every completion visible in memory.
    pub fn irq_handler(&mut self, soc: &mut Soc) {
        self.stats.irqs += 1;
        if self.reap(soc) == 0 {
            self.stats.spurious_irqs += 1;
        }
    }

    /// Completion scan outside interrupt context, for chains whose final
    /// descriptor does not interrupt.
    pub fn poll(&mut self, soc: &mut Soc) -> usize {
        self.reap(soc)
    }
}

/// A system plus its driver, stepped together.
pub struct DriverSim {
    pub soc: Soc,
    pub driver: Driver,
    /// Cycle of every delivered interrupt.
    pub irq_cycles: Vec<SimTime>,
}

impl DriverSim {
    pub fn new(soc: Soc, cfg: DriverConfig) -> Self {
        DriverSim {
            soc,
            driver: Driver::new(cfg),
            irq_cycles: Vec::new(),
        }
    }

    /// Run until the system is idle and the driver has nothing left to launch.
    pub fn run(&mut self, max_cycles: u64) -> Result<SimTime, SimError> {
        loop {
            match self.soc.step() {
                Some(t) if t.0 > max_cycles => {
                    return Err(SimError::Exhausted {
                        max_cycles,
                        last_cycle: t,
                    })
                }
                Some(t) => {
                    // level-triggered: one handler call covers every pending line
                    if !self.soc.take_irqs().is_empty() {
                        self.irq_cycles.push(t);
                        self.driver.irq_handler(&mut self.soc);
                    }
                }
                None => {
                    self.driver.poll(&mut self.soc);
                    if self.soc.is_done() {
                        return Ok(self.soc.now());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::validate_chain;
    use crate::mem::MemoryConfig;
    use crate::soc::DmacConfig;

    fn sim() -> DriverSim {
        DriverSim::new(
            Soc::new(&DmacConfig::base(), MemoryConfig::default()).unwrap(),
            DriverConfig::default(),
        )
    }

    #[test]
    fn small_copy_is_one_descriptor() {
        let mut s = sim();
        let h = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000, 0x2000, 64, true)
            .unwrap();
        assert_eq!(s.driver.handle(h).unwrap().descriptors.len(), 1);
    }

    #[test]
    fn huge_copy_splits() {
        let mut s = sim();
        let len = (1u64 << 32) + 8;
        let h = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000, 0x2000, len, true)
            .unwrap();
        let addrs = s.driver.handle(h).unwrap().descriptors.clone();
        assert_eq!(addrs.len(), 2);
        let chain = validate_chain(s.soc.memory(), addrs[0], 8).unwrap();
        let lens: Vec<u64> = chain.entries.iter().map(|(_, d)| d.length as u64).collect();
        assert_eq!(lens, vec![MAX_DESCRIPTOR_LENGTH, 16]);
        assert_eq!(lens.iter().sum::<u64>(), len);
        assert!(!chain.entries[0].1.config.irq_on_completion());
        assert!(chain.entries[1].1.config.irq_on_completion());
        assert_eq!(chain.entries[1].1.source, 0x1000 + MAX_DESCRIPTOR_LENGTH);
    }

    #[test]
    fn zero_length_completes() {
        let mut s = sim();
        let h = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000, 0x2000, 0, true)
            .unwrap();
        s.driver.commit(&mut s.soc, &[h]).unwrap();
        s.driver.issue(&mut s.soc);
        s.run(10_000).unwrap();
        assert_eq!(s.driver.handle(h).unwrap().state, HandleState::Completed);
    }

    #[test]
    fn commit_splices_in_order() {
        let mut s = sim();
        let a = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000, 0x2000, 64, true)
            .unwrap();
        let b = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1100, 0x2100, 64, true)
            .unwrap();
        s.driver.commit(&mut s.soc, &[a, b]).unwrap();
        let head_a = s.driver.handle(a).unwrap().descriptors[0];
        let head_b = s.driver.handle(b).unwrap().descriptors[0];
        let chain = validate_chain(s.soc.memory(), head_a, 8).unwrap();
        assert_eq!(chain.entries[0].1.next, head_b);
        assert!(!chain.entries[0].1.config.irq_on_completion());
        assert_eq!(
            s.driver.commit(&mut s.soc, &[a]),
            Err(DriverError::WrongState(a))
        );
        assert_eq!(s.driver.commit(&mut s.soc, &[]), Ok(()));
    }

    #[test]
    fn chain_cap_defers() {
        let mut s = sim();
        for i in 0..5u64 {
            let h = s
                .driver
                .prepare_memcpy(
                    &mut s.soc,
                    0x10_0000 + i * 0x100,
                    0x20_0000 + i * 0x100,
                    64,
                    true,
                )
                .unwrap();
            s.driver.commit(&mut s.soc, &[h]).unwrap();
        }
        s.driver.issue(&mut s.soc);
        assert_eq!(s.driver.stats().csr_launches, 4);
        assert_eq!(s.driver.deferred_chains(), 1);
        s.run(100_000).unwrap();
        assert_eq!(s.driver.stats().csr_launches, 5);
        assert_eq!(s.driver.outstanding(), 0);
    }

    #[test]
    fn issue_with_nothing_committed() {
        let mut s = sim();
        s.driver.issue(&mut s.soc);
        assert_eq!(s.driver.stats().csr_launches, 0);
        assert!(s.soc.is_done());
    }

    #[test]
    fn arena_exhaustion() {
        let mut s = DriverSim::new(
            Soc::new(&DmacConfig::base(), MemoryConfig::default()).unwrap(),
            DriverConfig {
                arena_bytes: 64,
                ..Default::default()
            },
        );
        s.driver
            .prepare_memcpy(&mut s.soc, 0, 0x100, 8, false)
            .unwrap();
        s.driver
            .prepare_memcpy(&mut s.soc, 0, 0x100, 8, false)
            .unwrap();
        assert_eq!(
            s.driver.prepare_memcpy(&mut s.soc, 0, 0x100, 8, false),
            Err(DriverError::ArenaExhausted)
        );
    }
}
