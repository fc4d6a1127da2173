//! Run summaries computed from the event log and the audit trail.
//!
//! Everything here works on the written artifacts, so `hm-sim metrics` can
//! recompute a report from a run directory without re-simulating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canbus::{utilization, NodeId};
use crate::ecu::{EcuId, FaultKind};
use crate::escalation::{EscalationEvent, EscalationKind, Reason};
use crate::monitor::{detection_bound, Assessment};
use crate::protocol::is_health_id;
use crate::simcore::SimTime;

use super::invariants;
use super::log::{parse_audit, parse_events, Entry, LogLine, ParseError};
use super::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultLatency {
    pub index: usize,
    pub ecu: EcuId,
    pub fault: FaultKind,
    pub onset_us: u64,
    pub applied: bool,
    /// Escalation that counts as detecting this fault.
    pub expected: EscalationKind,
    pub detected_us: Option<u64>,
    pub latency_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub overall: f64,
    /// Polls, responses and correctives only.
    pub health: f64,
    pub window_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationCounts {
    pub display_warning: u64,
    pub driver_notification: u64,
    pub service_station_report: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub polls: u64,
    pub retries: u64,
    pub acks: u64,
    pub nacks: u64,
    pub stale: u64,
    pub missed: u64,
    pub correctives: u64,
    pub frames_delivered: u64,
    pub background_frames: u64,
    pub aborted: u64,
    pub discarded: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelematicsCounts {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub fleet_size: u8,
    pub horizon_us: u64,
    pub detection_bound_us: u64,
    pub faults: Vec<FaultLatency>,
    pub max_latency_us: Option<u64>,
    pub utilization: Utilization,
    pub escalations: EscalationCounts,
    pub traffic: Traffic,
    pub telematics: TelematicsCounts,
    pub violations: Vec<String>,
    pub scenario: Scenario,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("events.log {0}")]
    Events(ParseError),
    #[error("audit.log {0}")]
    Audit(ParseError),
    #[error("events.log does not start with a header line")]
    NoHeader,
}

/// The escalation that marks detection of `fault`.
pub fn detection_kind(fault: FaultKind) -> EscalationKind {
    match fault {
        FaultKind::Minor { .. } => EscalationKind::DisplayWarning,
        FaultKind::Major { .. } | FaultKind::FailSilent => EscalationKind::DriverNotification,
    }
}

pub fn detects(fault: FaultKind, e: &EscalationEvent) -> bool {
    if e.kind != detection_kind(fault) {
        return false;
    }
    match (fault, e.reason) {
        (FaultKind::FailSilent, Reason::Unresponsive) => true,
        (FaultKind::Major { code }, Reason::Major(c)) => c == code,
        (FaultKind::Minor { code, .. }, Reason::Minor(c) | Reason::PersistentMinor(c)) => c == code,
        _ => false,
    }
}

pub fn compute(sc: &Scenario, log: &[LogLine], audit: &[EscalationEvent]) -> RunReport {
    let bound = detection_bound(&sc.monitor);
    let mut violations = invariants::check(sc, log, audit);

    let mut faults = Vec::new();
    let mut traffic = Traffic::default();
    let mut tele = TelematicsCounts::default();
    let mut spans = Vec::new();
    let mut health_spans = Vec::new();
    // assessment at each fault onset, for the completeness check
    let mut assessed: Vec<Assessment> = vec![Assessment::Ok; usize::from(sc.fleet_size) + 1];

    for l in log {
        let t = SimTime::from_micros(l.t_us);
        match &l.entry {
            Entry::Fault { index, ecu, fault, applied, .. } => {
                let detected = if *applied {
                    audit.iter().find(|e| e.ecu == *ecu && e.at >= t && detects(*fault, e)).map(|e| e.at)
                } else {
                    None
                };
                let latency = detected.map(|d| d - t);
                if let Some(lat) = latency {
                    if lat > bound {
                        violations.push(format!(
                            "latency: fault {index} on ecu {ecu} detected after {lat}, bound is {bound}"
                        ));
                    }
                }
                let permanent = sc.faults.get(*index).is_some_and(|f| f.duration.is_none());
                let already = assessed[usize::from(ecu.get())] == Assessment::Unresponsive;
                if *applied
                    && *fault == FaultKind::FailSilent
                    && permanent
                    && !already
                    && detected.is_none()
                    && t + bound <= sc.horizon
                {
                    violations.push(format!("completeness: fail-silent fault {index} on ecu {ecu} never detected"));
                }
                faults.push(FaultLatency {
                    index: *index,
                    ecu: *ecu,
                    fault: *fault,
                    onset_us: l.t_us,
                    applied: *applied,
                    expected: detection_kind(*fault),
                    detected_us: detected.map(SimTime::as_micros),
                    latency_us: latency.map(SimTime::as_micros),
                });
            }
            Entry::Assess { ecu, to, .. } => assessed[usize::from(ecu.get())] = *to,
            Entry::Poll { attempt, .. } => {
                traffic.polls += 1;
                traffic.retries += u64::from(*attempt > 0);
            }
            Entry::Response { status, .. } => {
                if *status == 0 {
                    traffic.acks += 1;
                } else {
                    traffic.nacks += 1;
                }
            }
            Entry::Stale { .. } => traffic.stale += 1,
            Entry::Missed { .. } => traffic.missed += 1,
            Entry::CorrectiveSent { .. } => traffic.correctives += 1,
            Entry::Deliver { id, sender, start_us, .. } => {
                traffic.frames_delivered += 1;
                traffic.background_frames += u64::from(*sender == NodeId::BACKGROUND.0);
                let span = (SimTime::from_micros(*start_us), t);
                spans.push(span);
                if is_health_id(*id, sc.fleet_size) {
                    health_spans.push(span);
                }
            }
            Entry::TxAbort { start_us, .. } => {
                traffic.aborted += 1;
                spans.push((SimTime::from_micros(*start_us), t));
            }
            Entry::Discard { .. } => traffic.discarded += 1,
            Entry::Telematics { delivered, .. } => {
                tele.sent += 1;
                if *delivered {
                    tele.delivered += 1;
                } else {
                    tele.lost += 1;
                }
            }
            _ => {}
        }
    }

    let mut esc = EscalationCounts::default();
    for e in audit {
        match e.kind {
            EscalationKind::DisplayWarning => esc.display_warning += 1,
            EscalationKind::DriverNotification => esc.driver_notification += 1,
            EscalationKind::ServiceStationReport => esc.service_station_report += 1,
        }
    }

    let window = (SimTime::ZERO, sc.horizon);
    let utilization = Utilization {
        overall: utilization(spans, window.0, window.1).unwrap_or(0.0),
        health: utilization(health_spans, window.0, window.1).unwrap_or(0.0),
        window_us: sc.horizon.as_micros(),
    };

    RunReport {
        seed: sc.seed,
        fleet_size: sc.fleet_size,
        horizon_us: sc.horizon.as_micros(),
        detection_bound_us: bound.as_micros(),
        max_latency_us: faults.iter().filter_map(|f| f.latency_us).max(),
        faults,
        utilization,
        escalations: esc,
        traffic,
        telematics: tele,
        violations,
        scenario: sc.clone(),
    }
}

/// Recompute a report from the text of `events.log` and `audit.log`.
pub fn compute_from_text(events: &str, audit: &str) -> Result<RunReport, MetricsError> {
    let log = parse_events(events).map_err(MetricsError::Events)?;
    let audit = parse_audit(audit).map_err(MetricsError::Audit)?;
    let sc = match log.first().map(|l| &l.entry) {
        Some(Entry::Header { scenario, .. }) => scenario.as_ref().clone(),
        _ => return Err(MetricsError::NoHeader),
    };
    Ok(compute(&sc, &log, &audit))
}
