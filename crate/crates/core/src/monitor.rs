//! The health-monitoring ECU.
//!
//! Each cycle of length `period` is divided into one evenly spaced slot per
//! ECU. At its slot an ECU is polled and must answer within `deadline`. A
//! missed deadline is retried up to `retries` times, `retry_spacing` apart;
//! after `retries + 1` consecutive misses the ECU is declared unresponsive
//! and reported to the driver and the service station.
//!
//! Responses are handled per the workflow:
//!
//! * ACK: the ECU is OK.
//! * NACK with a minor code: send a corrective action and warn the display.
//!   If the same minor code is still reported on the
//!   `minor_escalation_threshold`-th consecutive response it is escalated
//!   like a major fault.
//! * NACK with a major code: display warning, driver notification and
//!   service-station report, once per episode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canbus::Frame;
use crate::ecu::{severity_of, EcuId, Severity};
use crate::escalation::{EscalationKind, Reason};
use crate::protocol::{self, STATUS_ACK};
use crate::simcore::{Classify, EventHandle, EventKind, Kernel, SimTime, Target};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("cycle period must be positive")]
    ZeroPeriod,
    #[error("ack deadline must be positive")]
    ZeroDeadline,
    #[error("minor escalation threshold must be at least 1")]
    ZeroThreshold,
    #[error("poll order must list each of the {n} ECUs exactly once")]
    BadPollOrder { n: u8 },
    #[error(
        "poll slot of {slot_us}us is shorter than the deadline plus retry budget ({needed_us}us); \
         raise the period or lower deadline/retries"
    )]
    SlotTooShort { slot_us: u64, needed_us: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    #[serde(rename = "period_us")]
    pub period: SimTime,
    #[serde(rename = "deadline_us")]
    pub deadline: SimTime,
    pub retries: u32,
    #[serde(rename = "retry_spacing_us")]
    pub retry_spacing: SimTime,
    pub poll_order: Vec<EcuId>,
    pub minor_escalation_threshold: u32,
}

impl MonitorConfig {
    pub const DEFAULT_PERIOD: SimTime = SimTime::from_secs(1);
    pub const DEFAULT_DEADLINE: SimTime = SimTime::from_millis(10);
    pub const DEFAULT_RETRIES: u32 = 2;
    pub const DEFAULT_MINOR_THRESHOLD: u32 = 3;

    /// Defaults for a fleet of `n` ECUs polled in ascending order.
    pub fn for_fleet(n: u8) -> Self {
        MonitorConfig {
            period: Self::DEFAULT_PERIOD,
            deadline: Self::DEFAULT_DEADLINE,
            retries: Self::DEFAULT_RETRIES,
            retry_spacing: Self::DEFAULT_DEADLINE,
            poll_order: EcuId::fleet(n).collect(),
            minor_escalation_threshold: Self::DEFAULT_MINOR_THRESHOLD,
        }
    }

    pub fn fleet_size(&self) -> u8 {
        self.poll_order.len() as u8
    }

    /// Time from a slot's first poll to the last retry's deadline:
    /// `(R+1)·D + R·spacing`.
    pub fn retry_chain(&self) -> SimTime {
        let r = u64::from(self.retries);
        self.deadline * (r + 1) + self.retry_spacing * r
    }

    /// Offset of slot `k` within a cycle, `floor(k·P/N)`.
    pub fn slot_offset(&self, k: usize) -> SimTime {
        let n = self.poll_order.len() as u128;
        let p = u128::from(self.period.as_micros());
        SimTime::from_micros((k as u128 * p / n) as u64)
    }

    pub fn validate(&self, n: u8) -> Result<(), MonitorError> {
        if self.period == SimTime::ZERO {
            return Err(MonitorError::ZeroPeriod);
        }
        if self.deadline == SimTime::ZERO {
            return Err(MonitorError::ZeroDeadline);
        }
        if self.minor_escalation_threshold == 0 {
            return Err(MonitorError::ZeroThreshold);
        }
        let mut sorted = self.poll_order.clone();
        sorted.sort();
        if n == 0 || !sorted.iter().copied().eq(EcuId::fleet(n)) || usize::from(n) != self.poll_order.len() {
            return Err(MonitorError::BadPollOrder { n });
        }
        // P/N >= chain  <=>  P >= N·chain, kept in integers
        let needed = self.retry_chain().as_micros();
        if u128::from(self.period.as_micros()) < u128::from(needed) * u128::from(n) {
            return Err(MonitorError::SlotTooShort {
                slot_us: self.period.as_micros() / u64::from(n),
                needed_us: needed,
            });
        }
        Ok(())
    }
}

/// Worst-case fail-silent detection latency, `P + (R+1)·D + R·spacing`.
///
/// The worst onset is just after a successful response: the fault is only
/// seen at the next cycle's poll, and then the whole retry chain runs.
pub fn detection_bound(config: &MonitorConfig) -> SimTime {
    config.period + config.retry_chain()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "code", rename_all = "snake_case")]
pub enum Assessment {
    Ok,
    Degraded(u8),
    Unresponsive,
}

/// What an escalation episode was about; repeated evidence of the same cause
/// does not escalate again until the ECU ACKs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EscalationCause {
    Unresponsive,
    Code(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EcuRecord {
    pub ecu: EcuId,
    pub assessed: Assessment,
    pub consecutive_misses: u32,
    pub last_poll: Option<SimTime>,
    pub last_response: Option<SimTime>,
    pub escalated: Option<EscalationCause>,
    /// `(code, consecutive minor NACKs with that code)`.
    pub minor_streak: Option<(u8, u32)>,
    deadline: Option<EventHandle>,
    retry: Option<EventHandle>,
}

impl EcuRecord {
    fn new(ecu: EcuId) -> Self {
        EcuRecord {
            ecu,
            assessed: Assessment::Ok,
            consecutive_misses: 0,
            last_poll: None,
            last_response: None,
            escalated: None,
            minor_streak: None,
            deadline: None,
            retry: None,
        }
    }

    pub fn awaiting_response(&self) -> bool {
        self.deadline.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorEvent {
    Slot { cycle: u64, index: usize },
    Deadline(EcuId),
    Retry(EcuId),
}

impl Classify for MonitorEvent {
    fn kind(&self) -> EventKind {
        EventKind::TimerExpiry
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorAction {
    /// Put a poll on the bus; `attempt` is 0 for the slot poll, `k` for the k-th retry.
    Poll {
        ecu: EcuId,
        attempt: u32,
        frame: Frame,
    },
    Corrective {
        ecu: EcuId,
        frame: Frame,
    },
    Response {
        ecu: EcuId,
        status: u8,
    },
    Stale {
        ecu: EcuId,
        status: u8,
    },
    Missed {
        ecu: EcuId,
        misses: u32,
    },
    Assess {
        ecu: EcuId,
        from: Assessment,
        to: Assessment,
    },
    Escalate {
        ecu: EcuId,
        kind: EscalationKind,
        reason: Reason,
    },
}

pub struct Monitor {
    config: MonitorConfig,
    records: BTreeMap<EcuId, EcuRecord>,
    stop_at: SimTime,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Result<Self, MonitorError> {
        let n = config.fleet_size();
        config.validate(n)?;
        let records = config.poll_order.iter().map(|&e| (e, EcuRecord::new(e))).collect();
        Ok(Monitor { config, records, stop_at: SimTime::MAX })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn record(&self, ecu: EcuId) -> Option<&EcuRecord> {
        self.records.get(&ecu)
    }

    pub fn records(&self) -> impl Iterator<Item = &EcuRecord> {
        self.records.values()
    }

    /// `(ok, degraded, unresponsive)`.
    pub fn counts(&self) -> (u32, u32, u32) {
        self.records.values().fold((0, 0, 0), |(o, d, u), r| match r.assessed {
            Assessment::Ok => (o + 1, d, u),
            Assessment::Degraded(_) => (o, d + 1, u),
            Assessment::Unresponsive => (o, d, u + 1),
        })
    }

    /// Schedule the first slot at t = 0. No slot starts at or after `stop_at`.
    pub fn start<P>(&mut self, kernel: &mut Kernel<P>, stop_at: SimTime)
    where
        P: Classify + From<MonitorEvent>,
    {
        self.stop_at = stop_at;
        self.schedule_slot(kernel, 0, 0);
    }

    fn schedule_slot<P>(&mut self, kernel: &mut Kernel<P>, cycle: u64, index: usize)
    where
        P: Classify + From<MonitorEvent>,
    {
        let Some(at) = (self.config.period * cycle).checked_add(self.config.slot_offset(index)) else {
            return;
        };
        if at < self.stop_at {
            kernel
                .schedule(at, Target::Monitor, MonitorEvent::Slot { cycle, index }.into())
                .expect("slots are strictly increasing");
        }
    }

    pub fn handle<P>(&mut self, kernel: &mut Kernel<P>, event: MonitorEvent) -> Vec<MonitorAction>
    where
        P: Classify + From<MonitorEvent>,
    {
        match event {
            MonitorEvent::Slot { cycle, index } => self.poll_next(kernel, cycle, index),
            MonitorEvent::Deadline(ecu) => self.on_deadline(kernel, ecu),
            MonitorEvent::Retry(ecu) => {
                let rec = self.records.get_mut(&ecu).expect("known ecu");
                rec.retry = None;
                let attempt = rec.consecutive_misses;
                vec![self.poll(kernel, ecu, attempt)]
            }
        }
    }

    fn poll_next<P>(&mut self, kernel: &mut Kernel<P>, cycle: u64, index: usize) -> Vec<MonitorAction>
    where
        P: Classify + From<MonitorEvent>,
    {
        let ecu = self.config.poll_order[index];
        if index + 1 == self.config.poll_order.len() {
            self.schedule_slot(kernel, cycle + 1, 0);
        } else {
            self.schedule_slot(kernel, cycle, index + 1);
        }
        vec![self.poll(kernel, ecu, 0)]
    }

    fn poll<P>(&mut self, kernel: &mut Kernel<P>, ecu: EcuId, attempt: u32) -> MonitorAction
    where
        P: Classify + From<MonitorEvent>,
    {
        let deadline = self.config.deadline;
        let rec = self.records.get_mut(&ecu).expect("known ecu");
        if let Some(h) = rec.deadline.take() {
            kernel.cancel(h);
        }
        rec.last_poll = Some(kernel.now());
        rec.deadline = Some(kernel.schedule_in(deadline, Target::Monitor, MonitorEvent::Deadline(ecu).into()));
        MonitorAction::Poll { ecu, attempt, frame: protocol::poll_frame(ecu) }
    }

    pub fn on_response<P>(&mut self, kernel: &mut Kernel<P>, frame: &Frame) -> Vec<MonitorAction>
    where
        P: Classify,
    {
        let Some((ecu, status)) = protocol::parse_response(frame) else {
            return Vec::new();
        };
        let threshold = self.config.minor_escalation_threshold;
        let Some(rec) = self.records.get_mut(&ecu) else {
            return vec![MonitorAction::Stale { ecu, status }];
        };
        let Some(h) = rec.deadline.take() else {
            return vec![MonitorAction::Stale { ecu, status }];
        };
        kernel.cancel(h);
        rec.last_response = Some(kernel.now());
        rec.consecutive_misses = 0;

        let mut out = vec![MonitorAction::Response { ecu, status }];
        let from = rec.assessed;
        if status == STATUS_ACK {
            rec.assessed = Assessment::Ok;
            rec.escalated = None;
            rec.minor_streak = None;
        } else {
            rec.assessed = Assessment::Degraded(status);
        }
        if from != rec.assessed {
            out.push(MonitorAction::Assess { ecu, from, to: rec.assessed });
        }
        if status == STATUS_ACK {
            return out;
        }

        let code = status;
        let escalate = |out: &mut Vec<MonitorAction>, reason| {
            for kind in [
                EscalationKind::DisplayWarning,
                EscalationKind::DriverNotification,
                EscalationKind::ServiceStationReport,
            ] {
                out.push(MonitorAction::Escalate { ecu, kind, reason });
            }
        };
        match severity_of(code) {
            Severity::Minor => {
                let streak = match rec.minor_streak {
                    Some((c, n)) if c == code => n + 1,
                    _ => 1,
                };
                rec.minor_streak = Some((code, streak));
                if streak < threshold {
                    out.push(MonitorAction::Corrective { ecu, frame: protocol::corrective_frame(ecu) });
                    out.push(MonitorAction::Escalate {
                        ecu,
                        kind: EscalationKind::DisplayWarning,
                        reason: Reason::Minor(code),
                    });
                } else if rec.escalated != Some(EscalationCause::Code(code)) {
                    rec.escalated = Some(EscalationCause::Code(code));
                    escalate(&mut out, Reason::PersistentMinor(code));
                }
            }
            Severity::Major => {
                rec.minor_streak = None;
                if rec.escalated != Some(EscalationCause::Code(code)) {
                    rec.escalated = Some(EscalationCause::Code(code));
                    escalate(&mut out, Reason::Major(code));
                }
            }
        }
        out
    }

    fn on_deadline<P>(&mut self, kernel: &mut Kernel<P>, ecu: EcuId) -> Vec<MonitorAction>
    where
        P: Classify + From<MonitorEvent>,
    {
        let retries = self.config.retries;
        let spacing = self.config.retry_spacing;
        let rec = self.records.get_mut(&ecu).expect("known ecu");
        rec.deadline = None;
        rec.consecutive_misses = rec.consecutive_misses.saturating_add(1);
        let misses = rec.consecutive_misses;
        let mut out = vec![MonitorAction::Missed { ecu, misses }];
        if misses <= retries {
            rec.retry = Some(kernel.schedule_in(spacing, Target::Monitor, MonitorEvent::Retry(ecu).into()));
        } else if misses == retries + 1 {
            let from = rec.assessed;
            rec.assessed = Assessment::Unresponsive;
            if from != Assessment::Unresponsive {
                out.push(MonitorAction::Assess { ecu, from, to: Assessment::Unresponsive });
            }
            if rec.escalated != Some(EscalationCause::Unresponsive) {
                rec.escalated = Some(EscalationCause::Unresponsive);
                for kind in [EscalationKind::DriverNotification, EscalationKind::ServiceStationReport] {
                    out.push(MonitorAction::Escalate { ecu, kind, reason: Reason::Unresponsive });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canbus::NodeId;

    fn cfg(n: u8) -> MonitorConfig {
        MonitorConfig::for_fleet(n)
    }

    fn e(id: u8) -> EcuId {
        EcuId::new(id).unwrap()
    }

    #[test]
    fn defaults() {
        let c = cfg(4);
        assert_eq!(c.period, SimTime::from_secs(1));
        assert_eq!(c.deadline, SimTime::from_millis(10));
        assert_eq!(c.retries, 2);
        assert_eq!(c.retry_spacing, c.deadline);
        assert_eq!(c.poll_order, vec![e(1), e(2), e(3), e(4)]);
        assert!(c.validate(4).is_ok());
    }

    #[test]
    fn slot_offsets_for_four() {
        let c = cfg(4);
        let offs: Vec<u64> = (0..4).map(|k| c.slot_offset(k).as_micros()).collect();
        assert_eq!(offs, vec![0, 250_000, 500_000, 750_000]);
    }

    #[test]
    fn eighty_ecus_need_short_retry_chains() {
        // slot = 12.5 ms; R=0 chain = 10 ms fits, R=2 chain = 50 ms does not
        let mut c = cfg(80);
        c.retries = 0;
        assert!(c.validate(80).is_ok());
        c.retries = 2;
        assert_eq!(c.validate(80), Err(MonitorError::SlotTooShort { slot_us: 12_500, needed_us: 50_000 }));
        c.period = SimTime::from_secs(4);
        assert!(c.validate(80).is_ok());
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = cfg(3);
        c.poll_order = vec![e(1), e(1), e(3)];
        assert_eq!(c.validate(3), Err(MonitorError::BadPollOrder { n: 3 }));
        let mut c = cfg(3);
        c.deadline = SimTime::ZERO;
        assert_eq!(c.validate(3), Err(MonitorError::ZeroDeadline));
        let mut c = cfg(3);
        c.period = SimTime::ZERO;
        assert_eq!(c.validate(3), Err(MonitorError::ZeroPeriod));
    }

    #[test]
    fn bound_closed_form() {
        assert_eq!(detection_bound(&cfg(4)), SimTime::from_millis(1_050));
        let mut c = cfg(4);
        c.retries = 0;
        assert_eq!(detection_bound(&c), c.period + c.deadline);
    }

    fn ack(ecu: u8, status: u8) -> Frame {
        protocol::response_frame(e(ecu), status)
    }

    #[test]
    fn ack_within_deadline_keeps_ok() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        m.start(&mut k, SimTime::MAX);
        let ev = k.pop_until(SimTime::ZERO).unwrap();
        let acts = m.handle(&mut k, ev.payload);
        assert!(matches!(acts[0], MonitorAction::Poll { attempt: 0, .. }));
        k.advance_to(SimTime::from_micros(500));
        let acts = m.on_response(&mut k, &ack(1, 0));
        assert_eq!(acts, vec![MonitorAction::Response { ecu: e(1), status: 0 }]);
        assert!(!m.record(e(1)).unwrap().awaiting_response());
        // deadline was cancelled: next event is slot 1
        let next = k.pop_until(SimTime::MAX).unwrap();
        assert_eq!(next.payload, MonitorEvent::Slot { cycle: 0, index: 1 });
    }

    #[test]
    fn response_without_poll_is_stale() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        assert_eq!(m.on_response(&mut k, &ack(2, 0)), vec![MonitorAction::Stale { ecu: e(2), status: 0 }]);
        let foreign = Frame::new(0x400, &[1, 2], NodeId::BACKGROUND).unwrap();
        assert!(m.on_response(&mut k, &foreign).is_empty());
    }

    fn arm(m: &mut Monitor, k: &mut Kernel<MonitorEvent>, ecu: u8) {
        m.records.get_mut(&e(ecu)).unwrap().deadline =
            Some(k.schedule_in(SimTime::from_millis(10), Target::Monitor, MonitorEvent::Deadline(e(ecu))));
    }

    #[test]
    fn minor_nack_sends_corrective_and_warning() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        arm(&mut m, &mut k, 3);
        let acts = m.on_response(&mut k, &ack(3, 0x2A));
        assert!(acts.iter().any(|a| matches!(a, MonitorAction::Corrective { .. })));
        let kinds: Vec<_> = acts
            .iter()
            .filter_map(|a| match a {
                MonitorAction::Escalate { kind, .. } => Some(*kind),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec![EscalationKind::DisplayWarning]);
        assert_eq!(m.record(e(3)).unwrap().assessed, Assessment::Degraded(0x2A));
    }

    #[test]
    fn persistent_minor_escalates_on_threshold() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        let mut driver_at = Vec::new();
        for round in 1..=5 {
            arm(&mut m, &mut k, 3);
            let acts = m.on_response(&mut k, &ack(3, 0x2A));
            if acts
                .iter()
                .any(|a| matches!(a, MonitorAction::Escalate { kind: EscalationKind::DriverNotification, .. }))
            {
                driver_at.push(round);
            }
        }
        assert_eq!(driver_at, vec![3]);
    }

    #[test]
    fn major_nack_escalates_once_per_episode() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        let mut n = 0;
        for _ in 0..3 {
            arm(&mut m, &mut k, 2);
            n += m.on_response(&mut k, &ack(2, 0x91)).len();
        }
        // 3 escalations + response + assess, then only responses
        assert_eq!(n, 5 + 1 + 1);
        arm(&mut m, &mut k, 2);
        m.on_response(&mut k, &ack(2, 0));
        arm(&mut m, &mut k, 2);
        let acts = m.on_response(&mut k, &ack(2, 0x91));
        assert!(acts
            .iter()
            .any(|a| matches!(a, MonitorAction::Escalate { kind: EscalationKind::DriverNotification, .. })));
    }

    #[test]
    fn silent_ecu_escalates_after_retry_chain() {
        let mut k: Kernel<MonitorEvent> = Kernel::new(0);
        let mut m = Monitor::new(cfg(4)).unwrap();
        m.start(&mut k, SimTime::from_millis(200));
        let mut unresponsive_at = None;
        let mut polls = Vec::new();
        k.run_until(SimTime::from_millis(200), |k, ev| {
            for a in m.handle(k, ev.payload) {
                match a {
                    MonitorAction::Poll { ecu, attempt, .. } if ecu == e(1) => {
                        polls.push((k.now().as_micros(), attempt))
                    }
                    MonitorAction::Escalate { ecu, kind: EscalationKind::DriverNotification, .. } if ecu == e(1) => {
                        unresponsive_at = Some(k.now())
                    }
                    _ => {}
                }
            }
        });
        assert_eq!(polls, vec![(0, 0), (20_000, 1), (40_000, 2)]);
        // first poll + 3D + 2·spacing
        assert_eq!(unresponsive_at, Some(SimTime::from_millis(50)));
        assert_eq!(m.record(e(1)).unwrap().assessed, Assessment::Unresponsive);
    }
}
