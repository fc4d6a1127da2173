//! Single CAN segment with identifier arbitration and worst-case frame timing.
//!
//! The bus is non-preemptive: once a frame wins arbitration it occupies the
//! wire for `frame_bits(dlc)` bit times. Frames that become ready meanwhile
//! wait for the next arbitration point, which opens `gap_bits` after the
//! previous delivery.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::{Classify, EventHandle, EventKind, Kernel, SimTime, Target};

pub const MAX_STD_ID: u16 = 0x7FF;
pub const MAX_DLC: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("identifier {0:#x} exceeds the 11-bit range")]
    IdOutOfRange(u16),
    #[error("data length {0} exceeds 8 bytes")]
    InvalidDlc(usize),
    #[error("node {0} is not registered on the bus")]
    UnregisteredSender(NodeId),
    #[error("node {sender} may not send identifier {id:#x}")]
    IdNotOwned { sender: NodeId, id: u16 },
    #[error("identifier range of node {0} overlaps another node")]
    OverlappingRange(NodeId),
    #[error("identifier {id:#x} pending from nodes {a} and {b}")]
    DuplicateId { id: u16, a: NodeId, b: NodeId },
    #[error("no pending frames to arbitrate")]
    NothingPending,
    #[error("bitrate must be positive")]
    ZeroBitrate,
    #[error("utilization window is empty")]
    EmptyWindow,
}

/// Bus participant. `0` is the health monitor, `1..=80` are ECUs and `0xFF`
/// stands for the abstract background-traffic source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u8);

impl NodeId {
    pub const MONITOR: NodeId = NodeId(0);
    pub const BACKGROUND: NodeId = NodeId(0xFF);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct CanId(u16);

impl CanId {
    pub fn new(raw: u16) -> Result<Self, BusError> {
        if raw > MAX_STD_ID {
            return Err(BusError::IdOutOfRange(raw));
        }
        Ok(CanId(raw))
    }

    pub fn raw(self) -> u16 {
        self.0
    }
}

impl TryFrom<u16> for CanId {
    type Error = BusError;

    fn try_from(raw: u16) -> Result<Self, BusError> {
        CanId::new(raw)
    }
}

impl From<CanId> for u16 {
    fn from(id: CanId) -> u16 {
        id.0
    }
}

impl fmt::Display for CanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#05x}", self.0)
    }
}

/// A standard (11-bit) data frame.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    id: CanId,
    dlc: u8,
    data: [u8; 8],
    sender: NodeId,
}

impl Frame {
    pub fn new(id: u16, payload: &[u8], sender: NodeId) -> Result<Self, BusError> {
        let id = CanId::new(id)?;
        if payload.len() > usize::from(MAX_DLC) {
            return Err(BusError::InvalidDlc(payload.len()));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Frame { id, dlc: payload.len() as u8, data, sender })
    }

    pub fn id(&self) -> CanId {
        self.id
    }

    pub fn dlc(&self) -> u8 {
        self.dlc
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..usize::from(self.dlc)]
    }

    pub fn sender(&self) -> NodeId {
        self.sender
    }

    pub fn bits(&self) -> u32 {
        frame_bits(self.dlc).expect("dlc validated at construction")
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frame({} from {} {:02x?})", self.id, self.sender, self.payload())
    }
}

/// Worst-case on-wire length of a standard data frame, including stuff bits
/// and the 3-bit interframe space.
///
/// 34 + 8·dlc bits (SOF through CRC) are subject to stuffing; the worst case
/// inserts one stuff bit after the first five and one after every four
/// thereafter.
pub fn frame_bits(dlc: u8) -> Result<u32, BusError> {
    if dlc > MAX_DLC {
        return Err(BusError::InvalidDlc(usize::from(dlc)));
    }
    let data = 8 * u32::from(dlc);
    Ok(data + 47 + (34 + data - 1) / 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusConfig {
    pub bitrate: u32,
    /// Idle bits between a delivery and the next arbitration point.
    pub gap_bits: u32,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig { bitrate: 500_000, gap_bits: 3 }
    }
}

impl BusConfig {
    pub fn validate(&self) -> Result<(), BusError> {
        if self.bitrate == 0 {
            return Err(BusError::ZeroBitrate);
        }
        Ok(())
    }

    /// Duration of `bits` bit times, rounded up to the next microsecond.
    pub fn bits_to_time(&self, bits: u32) -> SimTime {
        let num = u64::from(bits) * 1_000_000;
        SimTime::from_micros(num.div_ceil(u64::from(self.bitrate)))
    }

    pub fn frame_time(&self, frame: &Frame) -> SimTime {
        self.bits_to_time(frame.bits())
    }
}

/// Index of the arbitration winner: the numerically smallest identifier.
///
/// Equal identifiers from one sender are allowed (the earliest entry wins);
/// equal identifiers from different senders are a configuration fault.
pub fn arbitrate(pending: &[Frame]) -> Result<usize, BusError> {
    let mut order: Vec<usize> = (0..pending.len()).collect();
    order.sort_by_key(|&i| (pending[i].id, i));
    for w in order.windows(2) {
        let (a, b) = (&pending[w[0]], &pending[w[1]]);
        if a.id == b.id && a.sender != b.sender {
            return Err(BusError::DuplicateId { id: a.id.raw(), a: a.sender, b: b.sender });
        }
    }
    order.first().copied().ok_or(BusError::NothingPending)
}

/// One frame's trip across the bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub frame: Frame,
    pub submitted_at: SimTime,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusEvent {
    Arbitrate,
    TxComplete,
}

impl Classify for BusEvent {
    fn kind(&self) -> EventKind {
        match self {
            BusEvent::Arbitrate => EventKind::TimerExpiry,
            BusEvent::TxComplete => EventKind::FrameDelivery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusOutput {
    Started(Transmission),
    Delivered(Transmission),
    Idle,
}

/// Frames removed from the bus when their sender went silent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Withdrawal {
    pub discarded: Vec<Frame>,
    pub aborted: Option<Transmission>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    frame: Frame,
    submitted_at: SimTime,
}

pub struct Bus {
    config: BusConfig,
    owners: BTreeMap<NodeId, Vec<RangeInclusive<u16>>>,
    // keyed by (id, submission ordinal) so iteration order is arbitration order
    pending: BTreeMap<(u16, u64), Pending>,
    submissions: u64,
    in_flight: Option<(Transmission, EventHandle)>,
    arbitration: Option<EventHandle>,
    idle_from: SimTime,
    delivered: Vec<Transmission>,
}

impl Bus {
    pub fn new(config: BusConfig) -> Result<Self, BusError> {
        config.validate()?;
        Ok(Bus {
            config,
            owners: BTreeMap::new(),
            pending: BTreeMap::new(),
            submissions: 0,
            in_flight: None,
            arbitration: None,
            idle_from: SimTime::ZERO,
            delivered: Vec::new(),
        })
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    /// Attach a node with the identifier ranges it may transmit.
    pub fn register(&mut self, node: NodeId, ranges: Vec<RangeInclusive<u16>>) -> Result<(), BusError> {
        for r in &ranges {
            if *r.end() > MAX_STD_ID {
                return Err(BusError::IdOutOfRange(*r.end()));
            }
            let clash = self
                .owners
                .iter()
                .filter(|(n, _)| **n != node)
                .flat_map(|(_, rs)| rs.iter())
                .any(|o| r.start() <= o.end() && o.start() <= r.end());
            if clash {
                return Err(BusError::OverlappingRange(node));
            }
        }
        self.owners.entry(node).or_default().extend(ranges);
        Ok(())
    }

    pub fn delivered(&self) -> &[Transmission] {
        &self.delivered
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn submit<P>(&mut self, kernel: &mut Kernel<P>, frame: Frame) -> Result<(), BusError>
    where
        P: Classify + From<BusEvent>,
    {
        let ranges = self.owners.get(&frame.sender).ok_or(BusError::UnregisteredSender(frame.sender))?;
        let raw = frame.id.raw();
        if !ranges.iter().any(|r| r.contains(&raw)) {
            return Err(BusError::IdNotOwned { sender: frame.sender, id: raw });
        }
        if let Some(p) =
            self.pending.range((raw, 0)..=(raw, u64::MAX)).map(|(_, p)| p).find(|p| p.frame.sender != frame.sender)
        {
            return Err(BusError::DuplicateId { id: raw, a: p.frame.sender, b: frame.sender });
        }
        let ord = self.submissions;
        self.submissions += 1;
        self.pending.insert((raw, ord), Pending { frame, submitted_at: kernel.now() });
        self.wake(kernel);
        Ok(())
    }

    fn wake<P>(&mut self, kernel: &mut Kernel<P>)
    where
        P: Classify + From<BusEvent>,
    {
        if self.in_flight.is_none() && self.arbitration.is_none() && !self.pending.is_empty() {
            let at = self.idle_from.max(kernel.now());
            let h = kernel
                .schedule(at, Target::Bus, BusEvent::Arbitrate.into())
                .expect("arbitration is never scheduled in the past");
            self.arbitration = Some(h);
        }
    }

    pub fn handle<P>(&mut self, kernel: &mut Kernel<P>, event: BusEvent) -> Result<BusOutput, BusError>
    where
        P: Classify + From<BusEvent>,
    {
        match event {
            BusEvent::Arbitrate => {
                self.arbitration = None;
                if self.pending.is_empty() || self.in_flight.is_some() {
                    return Ok(BusOutput::Idle);
                }
                let keys: Vec<(u16, u64)> = self.pending.keys().copied().collect();
                let frames: Vec<Frame> = self.pending.values().map(|p| p.frame).collect();
                let winner = arbitrate(&frames)?;
                let p = self.pending.remove(&keys[winner]).expect("winner is pending");
                let start = kernel.now();
                let tx = Transmission {
                    frame: p.frame,
                    submitted_at: p.submitted_at,
                    start,
                    end: start + self.config.frame_time(&p.frame),
                };
                let h = kernel
                    .schedule(tx.end, Target::Bus, BusEvent::TxComplete.into())
                    .expect("transmission end is in the future");
                self.in_flight = Some((tx, h));
                Ok(BusOutput::Started(tx))
            }
            BusEvent::TxComplete => {
                let (tx, _) = self.in_flight.take().expect("completion without a frame in flight");
                self.delivered.push(tx);
                self.idle_from = kernel.now() + self.config.bits_to_time(self.config.gap_bits);
                self.wake(kernel);
                Ok(BusOutput::Delivered(tx))
            }
        }
    }

    /// Drop everything `sender` has queued and abort its frame on the wire.
    pub fn withdraw<P>(&mut self, kernel: &mut Kernel<P>, sender: NodeId) -> Withdrawal
    where
        P: Classify + From<BusEvent>,
    {
        let mut out = Withdrawal::default();
        let keys: Vec<(u16, u64)> =
            self.pending.iter().filter(|(_, p)| p.frame.sender == sender).map(|(k, _)| *k).collect();
        for k in keys {
            out.discarded.push(self.pending.remove(&k).expect("key listed").frame);
        }
        if matches!(self.in_flight, Some((tx, _)) if tx.frame.sender == sender) {
            let (tx, h) = self.in_flight.take().expect("checked above");
            kernel.cancel(h);
            out.aborted = Some(tx);
            self.idle_from = kernel.now() + self.config.bits_to_time(self.config.gap_bits);
            self.wake(kernel);
        }
        out
    }
}

/// Fraction of `[from, to)` during which the wire carried frames.
pub fn utilization<I>(spans: I, from: SimTime, to: SimTime) -> Result<f64, BusError>
where
    I: IntoIterator<Item = (SimTime, SimTime)>,
{
    if to <= from {
        return Err(BusError::EmptyWindow);
    }
    let busy: u64 = spans
        .into_iter()
        .map(|(s, e)| {
            let s = s.max(from);
            let e = e.min(to);
            e.as_micros().saturating_sub(s.as_micros())
        })
        .sum();
    Ok(busy as f64 / (to - from).as_micros() as f64)
}
