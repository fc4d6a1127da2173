//! Output channels of the monitor: on-board display, driver notification and
//! the wireless link to the service station.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ecu::EcuId;
use crate::simcore::{RngStreams, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationKind {
    DisplayWarning,
    DriverNotification,
    ServiceStationReport,
}

impl EscalationKind {
    pub const ALL: [EscalationKind; 3] =
        [EscalationKind::DisplayWarning, EscalationKind::DriverNotification, EscalationKind::ServiceStationReport];

    pub fn as_str(self) -> &'static str {
        match self {
            EscalationKind::DisplayWarning => "display_warning",
            EscalationKind::DriverNotification => "driver_notification",
            EscalationKind::ServiceStationReport => "service_station_report",
        }
    }
}

/// Why an escalation was raised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reason {
    Minor(u8),
    Major(u8),
    /// A minor code that survived repeated corrective actions.
    PersistentMinor(u8),
    Unresponsive,
}

impl Reason {
    pub fn code(self) -> Option<u8> {
        match self {
            Reason::Minor(c) | Reason::Major(c) | Reason::PersistentMinor(c) => Some(c),
            Reason::Unresponsive => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Reason::Minor(_) => "minor",
            Reason::Major(_) => "major",
            Reason::PersistentMinor(_) => "persistent_minor",
            Reason::Unresponsive => "unresponsive",
        }
    }

    pub fn from_parts(label: &str, code: Option<u8>) -> Option<Reason> {
        Some(match (label, code) {
            ("minor", Some(c)) => Reason::Minor(c),
            ("major", Some(c)) => Reason::Major(c),
            ("persistent_minor", Some(c)) => Reason::PersistentMinor(c),
            ("unresponsive", None) => Reason::Unresponsive,
            _ => return None,
        })
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.code() {
            Some(c) => write!(f, "code={c:#04X}"),
            None => f.write_str("unresponsive"),
        }
    }
}

/// Audit-trail entry. Serialized one per line in `audit.log`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AuditLine", into = "AuditLine")]
pub struct EscalationEvent {
    pub at: SimTime,
    pub ecu: EcuId,
    pub kind: EscalationKind,
    pub reason: Reason,
    pub detail: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditLine {
    t_us: u64,
    ecu: EcuId,
    kind: EscalationKind,
    reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<u8>,
    detail: String,
}

impl From<EscalationEvent> for AuditLine {
    fn from(e: EscalationEvent) -> Self {
        AuditLine {
            t_us: e.at.as_micros(),
            ecu: e.ecu,
            kind: e.kind,
            reason: e.reason.label().to_owned(),
            code: e.reason.code(),
            detail: e.detail,
        }
    }
}

impl TryFrom<AuditLine> for EscalationEvent {
    type Error = String;

    fn try_from(l: AuditLine) -> Result<Self, String> {
        let reason = Reason::from_parts(&l.reason, l.code)
            .ok_or_else(|| format!("bad reason {:?} with code {:?}", l.reason, l.code))?;
        Ok(EscalationEvent { at: SimTime::from_micros(l.t_us), ecu: l.ecu, kind: l.kind, reason, detail: l.detail })
    }
}

/// Record on the service-station link. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRecord {
    pub t_us: u64,
    #[serde(rename = "type")]
    pub kind: WireType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecu: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unresponsive: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireType {
    Fault,
    Status,
}

impl WireRecord {
    pub fn fault(at: SimTime, ecu: EcuId, reason: Reason) -> Self {
        WireRecord {
            t_us: at.as_micros(),
            kind: WireType::Fault,
            ecu: Some(ecu.get()),
            reason: Some(reason.label().to_owned()),
            code: reason.code(),
            pos_m: None,
            ok: None,
            degraded: None,
            unresponsive: None,
        }
    }

    pub fn status(report: &VehicleStatusReport) -> Self {
        WireRecord {
            t_us: report.at.as_micros(),
            kind: WireType::Status,
            ecu: None,
            reason: None,
            code: None,
            pos_m: Some(report.odometer_m),
            ok: Some(report.ok),
            degraded: Some(report.degraded),
            unresponsive: Some(report.unresponsive),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("flat record always serializes")
    }
}

/// Periodic position and fleet-health snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleStatusReport {
    pub at: SimTime,
    pub odometer_m: u64,
    /// Metres east and north of the start point.
    pub position: (f64, f64),
    pub speed_mps: f64,
    pub fleet: u8,
    pub ok: u32,
    pub degraded: u32,
    pub unresponsive: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusConfig {
    #[serde(rename = "interval_us")]
    pub interval: SimTime,
    pub speed_mps: f64,
}

impl Default for StatusConfig {
    fn default() -> Self {
        StatusConfig { interval: SimTime::from_secs(10), speed_mps: 20.0 }
    }
}

impl StatusConfig {
    /// Straight-line constant-speed kinematics, heading east.
    pub fn report_at(
        &self,
        at: SimTime,
        fleet: u8,
        (ok, degraded, unresponsive): (u32, u32, u32),
    ) -> VehicleStatusReport {
        let travelled = self.speed_mps * at.as_secs_f64();
        VehicleStatusReport {
            at,
            odometer_m: travelled.floor() as u64,
            position: (travelled, 0.0),
            speed_mps: self.speed_mps,
            fleet,
            ok,
            degraded,
            unresponsive,
        }
    }

    /// Report instants `interval, 2·interval, …` up to and including `horizon`.
    pub fn schedule(&self, horizon: SimTime) -> impl Iterator<Item = SimTime> + '_ {
        (1u64..).map(|k| self.interval * k).take_while(move |t| *t <= horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelematicsConfig {
    #[serde(rename = "latency_us")]
    pub latency: SimTime,
    pub loss_probability: f64,
    /// Extra attempts after a lost transmission; 0 is fire-and-forget.
    pub resend_attempts: u32,
}

impl Default for TelematicsConfig {
    fn default() -> Self {
        TelematicsConfig { latency: SimTime::ZERO, loss_probability: 0.0, resend_attempts: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Delivered { arrive_at: SimTime, attempts: u32 },
    Lost { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InFlight {
    arrive_at: SimTime,
    ordinal: u64,
    record: WireRecord,
}

/// Lossy wireless link. Delivered records come out ordered by arrival time.
#[derive(Debug, Clone)]
pub struct TelematicsChannel {
    config: TelematicsConfig,
    sent: u64,
    delivered: Vec<InFlight>,
    lost: Vec<WireRecord>,
}

impl TelematicsChannel {
    pub const RNG_STREAM: &'static str = "telematics";

    pub fn new(config: TelematicsConfig) -> Self {
        TelematicsChannel { config, sent: 0, delivered: Vec::new(), lost: Vec::new() }
    }

    pub fn send_report(&mut self, at: SimTime, record: WireRecord, rng: &mut RngStreams) -> SendOutcome {
        let ordinal = self.sent;
        self.sent += 1;
        let tries = 1 + self.config.resend_attempts;
        for attempt in 1..=tries {
            if rng.uniform(Self::RNG_STREAM) >= self.config.loss_probability {
                let arrive_at = at + self.config.latency * u64::from(attempt);
                self.delivered.push(InFlight { arrive_at, ordinal, record });
                return SendOutcome::Delivered { arrive_at, attempts: attempt };
            }
        }
        self.lost.push(record);
        SendOutcome::Lost { attempts: tries }
    }

    pub fn lost(&self) -> &[WireRecord] {
        &self.lost
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// Delivered records in arrival order.
    pub fn wire(&self) -> Vec<&WireRecord> {
        let mut v: Vec<&InFlight> = self.delivered.iter().collect();
        v.sort_by_key(|f| (f.arrive_at, f.ordinal));
        v.into_iter().map(|f| &f.record).collect()
    }

    /// Newline-delimited wire stream.
    pub fn wire_text(&self) -> String {
        let mut s = String::new();
        for r in self.wire() {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }
}

/// Collects escalations in order and fans them out to their sinks.
#[derive(Debug, Clone)]
pub struct Escalation {
    audit: Vec<EscalationEvent>,
    display: Vec<(SimTime, String)>,
    driver: Vec<(SimTime, String)>,
    telematics: TelematicsChannel,
}

impl Escalation {
    pub fn new(telematics: TelematicsConfig) -> Self {
        Escalation {
            audit: Vec::new(),
            display: Vec::new(),
            driver: Vec::new(),
            telematics: TelematicsChannel::new(telematics),
        }
    }

    pub fn audit(&self) -> &[EscalationEvent] {
        &self.audit
    }

    /// Lines shown on the on-board display.
    pub fn display_transcript(&self) -> &[(SimTime, String)] {
        &self.display
    }

    pub fn driver_notifications(&self) -> &[(SimTime, String)] {
        &self.driver
    }

    pub fn telematics(&self) -> &TelematicsChannel {
        &self.telematics
    }

    fn push(
        &mut self,
        at: SimTime,
        ecu: EcuId,
        kind: EscalationKind,
        reason: Reason,
        detail: String,
    ) -> &EscalationEvent {
        debug_assert!(self.audit.last().is_none_or(|e| e.at <= at));
        self.audit.push(EscalationEvent { at, ecu, kind, reason, detail });
        self.audit.last().expect("just pushed")
    }

    pub fn display_warn(&mut self, at: SimTime, ecu: EcuId, reason: Reason) -> &EscalationEvent {
        let line = format!("WARN ecu={ecu} {reason}");
        self.display.push((at, line.clone()));
        self.push(at, ecu, EscalationKind::DisplayWarning, reason, line)
    }

    pub fn notify_driver(&mut self, at: SimTime, ecu: EcuId, reason: Reason) -> &EscalationEvent {
        let line = format!("DRIVER ecu={ecu} {reason}");
        self.driver.push((at, line.clone()));
        self.push(at, ecu, EscalationKind::DriverNotification, reason, line)
    }

    /// Audit a service-station fault report and hand it to the wireless link.
    pub fn report_fault(&mut self, at: SimTime, ecu: EcuId, reason: Reason, rng: &mut RngStreams) -> SendOutcome {
        let line = format!("SERVICE ecu={ecu} {reason}");
        self.push(at, ecu, EscalationKind::ServiceStationReport, reason, line);
        self.telematics.send_report(at, WireRecord::fault(at, ecu, reason), rng)
    }

    pub fn report_status(&mut self, report: &VehicleStatusReport, rng: &mut RngStreams) -> SendOutcome {
        self.telematics.send_report(report.at, WireRecord::status(report), rng)
    }

    pub fn raise(
        &mut self,
        at: SimTime,
        ecu: EcuId,
        kind: EscalationKind,
        reason: Reason,
        rng: &mut RngStreams,
    ) -> Option<SendOutcome> {
        match kind {
            EscalationKind::DisplayWarning => {
                self.display_warn(at, ecu, reason);
                None
            }
            EscalationKind::DriverNotification => {
                self.notify_driver(at, ecu, reason);
                None
            }
            EscalationKind::ServiceStationReport => Some(self.report_fault(at, ecu, reason, rng)),
        }
    }

    pub fn audit_text(&self) -> String {
        let mut s = String::new();
        for e in &self.audit {
            s.push_str(&serde_json::to_string(e).expect("audit entry serializes"));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(id: u8) -> EcuId {
        EcuId::new(id).unwrap()
    }

    #[test]
    fn display_line_format() {
        let mut esc = Escalation::new(TelematicsConfig::default());
        let ev = esc.display_warn(SimTime::from_millis(5), e(7), Reason::Minor(0x2A));
        assert_eq!(ev.detail, "WARN ecu=7 code=0x2A");
        esc.display_warn(SimTime::from_millis(5), e(8), Reason::Minor(0x2B));
        let lines: Vec<&str> = esc.display_transcript().iter().map(|(_, l)| l.as_str()).collect();
        assert_eq!(lines, vec!["WARN ecu=7 code=0x2A", "WARN ecu=8 code=0x2B"]);
    }

    #[test]
    fn unresponsive_fault_record_is_byte_exact() {
        let r = WireRecord::fault(SimTime::from_micros(12_050_000), e(3), Reason::Unresponsive);
        assert_eq!(r.to_line(), r#"{"t_us":12050000,"type":"fault","ecu":3,"reason":"unresponsive"}"#);
        let r = WireRecord::fault(SimTime::from_micros(1), e(3), Reason::Major(0x91));
        assert_eq!(r.to_line(), r#"{"t_us":1,"type":"fault","ecu":3,"reason":"major","code":145}"#);
    }

    #[test]
    fn status_record_and_kinematics() {
        let cfg = StatusConfig::default();
        let rep = cfg.report_at(SimTime::from_secs(30), 80, (80, 0, 0));
        assert_eq!(rep.odometer_m, 600);
        assert_eq!(
            WireRecord::status(&rep).to_line(),
            r#"{"t_us":30000000,"type":"status","pos_m":600,"ok":80,"degraded":0,"unresponsive":0}"#
        );
    }

    #[test]
    fn report_schedule_is_floor_of_horizon_over_interval() {
        let cfg = StatusConfig::default();
        let at: Vec<u64> = cfg.schedule(SimTime::from_secs(35)).map(|t| t.as_micros() / 1_000_000).collect();
        assert_eq!(at, vec![10, 20, 30]);
    }

    #[test]
    fn lossless_link_delivers_everything_in_order() {
        let mut rng = RngStreams::new(1);
        let mut ch = TelematicsChannel::new(TelematicsConfig::default());
        for i in 0..10 {
            let out = ch.send_report(
                SimTime::from_micros(i),
                WireRecord::fault(SimTime::from_micros(i), e(1), Reason::Unresponsive),
                &mut rng,
            );
            assert!(matches!(out, SendOutcome::Delivered { attempts: 1, .. }));
        }
        assert_eq!(ch.wire().len(), 10);
        assert!(ch.lost().is_empty());
    }

    #[test]
    fn certain_loss_with_resends_still_loses() {
        let mut rng = RngStreams::new(1);
        let cfg = TelematicsConfig { latency: SimTime::from_millis(50), loss_probability: 1.0, resend_attempts: 2 };
        let mut ch = TelematicsChannel::new(cfg);
        let out = ch.send_report(SimTime::ZERO, WireRecord::fault(SimTime::ZERO, e(1), Reason::Unresponsive), &mut rng);
        assert_eq!(out, SendOutcome::Lost { attempts: 3 });
        assert_eq!(ch.lost().len(), 1);
    }

    #[test]
    fn audit_line_round_trips() {
        let mut esc = Escalation::new(TelematicsConfig::default());
        let mut rng = RngStreams::new(0);
        esc.report_fault(SimTime::from_millis(1), e(2), Reason::PersistentMinor(0x11), &mut rng);
        let text = esc.audit_text();
        let back: EscalationEvent = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(&back, &esc.audit()[0]);
    }
}
