//! Deterministic discrete-event core: virtual clock and event queue.
//!
//! Events are ordered by `(fire_at, seq)`, where `seq` is a monotone counter
//! assigned at scheduling time, so two runs with the same inputs process
//! events in exactly the same order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

/// Simulated time in integer microseconds.
pub type Micros = u64;

pub const US_PER_SEC: u64 = 1_000_000;

/// Converts seconds to microseconds, rounding to the nearest microsecond.
pub fn secs_to_us(secs: f64) -> Micros {
    (secs * US_PER_SEC as f64).round().max(0.0) as Micros
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("event scheduled at {fire_at} us is in the past (now = {now} us)")]
    PastEvent { fire_at: Micros, now: Micros },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Micros,
}

impl SimClock {
    pub fn now(&self) -> Micros {
        self.now
    }

    fn advance(&mut self, to: Micros) {
        debug_assert!(to >= self.now, "clock moved backwards");
        self.now = to;
    }
}

/// A queued event carrying a payload of type `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<K> {
    pub fire_at: Micros,
    pub seq: u64,
    pub kind: K,
}

#[derive(Debug)]
struct Entry<K> {
    key: Reverse<(Micros, u64)>,
    kind: K,
}

impl<K> PartialEq for Entry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl<K> Eq for Entry<K> {}
impl<K> PartialOrd for Entry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<K> Ord for Entry<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Virtual clock plus a min-queue of pending events.
#[derive(Debug)]
pub struct Kernel<K> {
    clock: SimClock,
    queue: BinaryHeap<Entry<K>>,
    next_seq: u64,
    processed: u64,
    last_key: Option<(Micros, u64)>,
}

impl<K> Default for Kernel<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Kernel<K> {
    pub fn new() -> Self {
        Kernel {
            clock: SimClock::default(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            processed: 0,
            last_key: None,
        }
    }

    pub fn now(&self) -> Micros {
        self.clock.now()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Queues `kind` to fire at `fire_at` and returns its sequence number.
    pub fn schedule(&mut self, fire_at: Micros, kind: K) -> Result<u64, KernelError> {
        if fire_at < self.clock.now() {
            return Err(KernelError::PastEvent {
                fire_at,
                now: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry {
            key: Reverse((fire_at, seq)),
            kind,
        });
        Ok(seq)
    }

    /// Queues `kind` at `now + delay`.
    pub fn schedule_in(&mut self, delay: Micros, kind: K) -> u64 {
        let at = self.clock.now().saturating_add(delay);
        self.schedule(at, kind).expect("future event")
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.queue.peek().map(|e| e.key.0 .0)
    }

    /// Pops the next event if it fires at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: Micros) -> Option<Event<K>> {
        let next = self.queue.peek()?.key.0;
        if next.0 > t_end {
            return None;
        }
        let entry = self.queue.pop().expect("peeked");
        let (fire_at, seq) = entry.key.0;
        if let Some(last) = self.last_key {
            debug_assert!((fire_at, seq) > last, "event processed out of order");
        }
        self.last_key = Some((fire_at, seq));
        self.clock.advance(fire_at);
        self.processed += 1;
        Some(Event {
            fire_at,
            seq,
            kind: entry.kind,
        })
    }

    /// Moves the clock forward to `t` without processing anything.
    pub fn advance_to(&mut self, t: Micros) {
        if t > self.clock.now() {
            self.clock.advance(t);
        }
    }

    /// Drives `handler` over every event with `fire_at <= t_end`, then sets
    /// the clock to `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: Micros, mut handler: F)
    where
        F: FnMut(&mut Self, Event<K>),
    {
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.advance_to(t_end);
    }
}
