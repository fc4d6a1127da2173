//! Discrete-event kernel: virtual time, an ordered event queue and named
//! random streams.
//!
//! Events are processed in strict `(at, seq)` order. `seq` is assigned at
//! insertion, so two events scheduled for the same instant fire in the order
//! they were scheduled.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Virtual time in microseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn checked_add(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_add(rhs.0).map(SimTime)
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl std::ops::Mul<u64> for SimTime {
    type Output = SimTime;

    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Component an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Bus,
    Monitor,
    Ecu(u8),
    Injector,
    Telematics,
    Background,
}

/// Coarse classification of an event payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FrameDelivery,
    TimerExpiry,
    FaultInjection,
    ReportDue,
}

/// Implemented by payload types so the kernel can tag its trace.
pub trait Classify {
    fn kind(&self) -> EventKind;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub at: SimTime,
    pub seq: u64,
    pub target: Target,
    pub payload: P,
}

/// Returned by [`Kernel::schedule`]; cancels the event while it is pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle {
    at: SimTime,
    seq: u64,
}

impl EventHandle {
    pub fn at(&self) -> SimTime {
        self.at
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

/// One processed event as recorded by the kernel trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub at: SimTime,
    pub seq: u64,
    pub target: Target,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event scheduled in the past: at={at} now={now}")]
    InThePast { at: SimTime, now: SimTime },
}

/// Single-threaded event queue.
pub struct Kernel<P> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), (Target, P)>,
    trace: Option<Vec<TraceEntry>>,
    rng: RngStreams,
}

impl<P: Classify> Kernel<P> {
    pub fn new(seed: u64) -> Self {
        Kernel { now: SimTime::ZERO, next_seq: 0, queue: BTreeMap::new(), trace: None, rng: RngStreams::new(seed) }
    }

    /// Keep an in-memory record of every processed event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn schedule(&mut self, at: SimTime, target: Target, payload: P) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::InThePast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), (target, payload));
        Ok(EventHandle { at, seq })
    }

    /// Schedule `delay` after the current time.
    pub fn schedule_in(&mut self, delay: SimTime, target: Target, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, target, payload).expect("a non-negative delay never lands in the past")
    }

    /// Returns `true` if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.remove(&(handle.at, handle.seq)).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.queue.contains_key(&(handle.at, handle.seq))
    }

    /// Pop the next event if it is due at or before `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<P>> {
        let (&(at, seq), _) = self.queue.first_key_value()?;
        if at > limit {
            return None;
        }
        let (target, payload) = self.queue.remove(&(at, seq)).expect("key just observed");
        self.now = at;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry { at, seq, target, kind: payload.kind() });
        }
        Some(Event { at, seq, target, payload })
    }

    /// Process every event with `at <= until`, then set the clock to `until`.
    pub fn run_until<F>(&mut self, until: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Kernel<P>, Event<P>),
    {
        assert!(until >= self.now, "run_until({until}) is behind now={}", self.now);
        let mut count = 0;
        while let Some(event) = self.pop_until(until) {
            handler(self, event);
            count += 1;
        }
        self.now = until;
        count
    }

    pub fn advance_to(&mut self, t: SimTime) {
        assert!(t >= self.now);
        self.now = t;
    }

    pub fn rng_next(&mut self, label: &str) -> f64 {
        self.rng.uniform(label)
    }

    pub fn rng(&mut self) -> &mut RngStreams {
        &mut self.rng
    }
}

/// Independent pseudo-random streams keyed by label.
///
/// Each stream is seeded from `(seed, label)` only, so adding a stream never
/// shifts the sequence produced by another.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<String, ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed, streams: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, label: &str) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry(label.to_owned()).or_insert_with(|| ChaCha8Rng::seed_from_u64(stream_seed(seed, label)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self, label: &str) -> f64 {
        self.stream(label).random::<f64>()
    }
}

// FNV-1a over the label, folded into the run seed with a splitmix64 finalizer.
fn stream_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
