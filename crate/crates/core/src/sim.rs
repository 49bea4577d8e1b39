//! Cycle-indexed discrete-event kernel.
//!
//! Components never poll every cycle. Each one sleeps until an event targets
//! it, and events that fire on the same cycle are delivered in the order they
//! were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in simulated time, measured in clock cycles from reset.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn cycle(self) -> u64 {
        self.0
    }

    pub fn after(self, cycles: u64) -> SimTime {
        SimTime(self.0 + cycles)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies the component an event is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId(pub u16);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub target: ComponentId,
    pub payload: P,
    /// Insertion order; breaks ties between events on the same cycle.
    pub seq: u64,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<P> Eq for Event<P> {}

impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Event<P> {
    // BinaryHeap is a max-heap, so the earliest (fire_at, seq) must compare greatest.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled for cycle {fire_at} but simulation is already at cycle {now}")]
    ScheduleInPast { fire_at: SimTime, now: SimTime },
    #[error(
        "condition not reached within {max_cycles} cycles (last activity at cycle {last_cycle})"
    )]
    Exhausted {
        max_cycles: u64,
        last_cycle: SimTime,
    },
    #[error("max_cycles must be positive")]
    ZeroBudget,
}

/// Pending events ordered by `(fire_at, seq)`.
#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<Event<P>>,
    now: SimTime,
    next_seq: u64,
    delivered: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            delivered: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Enqueue `payload` for delivery to `target` at `fire_at`.
    ///
    /// Scheduling before the current cycle is a contract violation and panics;
    /// use [`EventQueue::try_schedule`] to get the error instead.
    pub fn schedule(&mut self, fire_at: SimTime, target: ComponentId, payload: P) -> u64 {
        match self.try_schedule(fire_at, target, payload) {
            Ok(seq) => seq,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn try_schedule(
        &mut self,
        fire_at: SimTime,
        target: ComponentId,
        payload: P,
    ) -> Result<u64, SimError> {
        if fire_at < self.now {
            return Err(SimError::ScheduleInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            fire_at,
            target,
            payload,
            seq,
        });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Remove the earliest event, advancing the clock to its cycle.
    pub fn pop(&mut self) -> Option<Event<P>> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.delivered += 1;
        Some(ev)
    }

    /// Remove the earliest event only if it fires on `cycle`.
    pub fn pop_at(&mut self, cycle: SimTime) -> Option<Event<P>> {
        if self.peek_time() == Some(cycle) {
            self.pop()
        } else {
            None
        }
    }

    /// Move the clock forward without delivering anything.
    pub fn advance_to(&mut self, cycle: SimTime) {
        assert!(cycle >= self.now, "time cannot move backwards");
        self.now = cycle;
    }
}

/// Something that can be advanced one active cycle at a time.
pub trait Simulation {
    fn now(&self) -> SimTime;

    /// Process every event of the next active cycle. Returns that cycle, or
    /// `None` when nothing remains to be done.
    fn step(&mut self) -> Option<SimTime>;
}

/// Step `sim` until `condition` holds, returning the cycle at which it first did.
///
/// Fails with [`SimError::Exhausted`] if the condition is still false once the
/// clock passes `max_cycles` or the simulation runs out of events.
pub fn run_until<S, F>(sim: &mut S, mut condition: F, max_cycles: u64) -> Result<SimTime, SimError>
where
    S: Simulation,
    F: FnMut(&S) -> bool,
{
    if max_cycles == 0 {
        return Err(SimError::ZeroBudget);
    }
    loop {
        if condition(sim) {
            return Ok(sim.now());
        }
        let last_cycle = sim.now();
        match sim.step() {
            Some(t) if t.cycle() <= max_cycles => {}
            _ => {
                return Err(SimError::Exhausted {
                    max_cycles,
                    last_cycle,
                })
            }
        }
    }
}
