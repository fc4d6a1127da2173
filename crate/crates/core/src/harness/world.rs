//! Wires the bus, the ECU fleet, the monitor and the escalation sinks into
//! one kernel and runs a scenario to its horizon.

use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::canbus::{Bus, BusError, BusEvent, BusOutput, Frame, NodeId};
use crate::ecu::{CorrectiveOutcome, EcuError, EcuId, EcuNode, InjectOutcome, NodeEvent, PollOutcome};
use crate::escalation::{Escalation, EscalationEvent, SendOutcome, WireType};
use crate::monitor::{Monitor, MonitorAction, MonitorError, MonitorEvent};
use crate::protocol::{self, CORRECTIVE_ID, POLL_ID};
use crate::simcore::{Classify, Event, EventKind, Kernel, SimTime, Target};

use super::log::{self, CorrectiveResult, Entry, LogLine};
use super::metrics::{self, RunReport};
use super::scenario::{Invalid, Scenario};

pub const BACKGROUND_STREAM: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Bus(BusEvent),
    Node(NodeEvent),
    Monitor(MonitorEvent),
    Inject(usize),
    Recover(usize),
    StatusDue,
    Background,
}

impl Classify for Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Bus(b) => b.kind(),
            Payload::Node(n) => n.kind(),
            Payload::Monitor(m) => m.kind(),
            Payload::Inject(_) | Payload::Recover(_) => EventKind::FaultInjection,
            Payload::StatusDue => EventKind::ReportDue,
            Payload::Background => EventKind::TimerExpiry,
        }
    }
}

impl From<BusEvent> for Payload {
    fn from(e: BusEvent) -> Self {
        Payload::Bus(e)
    }
}

impl From<NodeEvent> for Payload {
    fn from(e: NodeEvent) -> Self {
        Payload::Node(e)
    }
}

impl From<MonitorEvent> for Payload {
    fn from(e: MonitorEvent) -> Self {
        Payload::Monitor(e)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Invalid(#[from] Invalid),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("ecu: {0}")]
    Ecu(#[from] EcuError),
    #[error("monitor: {0}")]
    Monitor(#[from] MonitorError),
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub log: Vec<LogLine>,
    pub audit: Vec<EscalationEvent>,
    pub display: Vec<(SimTime, String)>,
    pub driver: Vec<(SimTime, String)>,
    pub telematics: String,
    pub report: RunReport,
}

impl RunOutput {
    pub fn events_text(&self) -> String {
        log::to_text(&self.log)
    }

    pub fn audit_text(&self) -> String {
        let mut s = String::new();
        for e in &self.audit {
            s.push_str(&serde_json::to_string(e).expect("audit entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn report_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    /// Write `events.log`, `audit.log`, `telematics.ndrec` and `report.json`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("events.log"), self.events_text())?;
        std::fs::write(dir.join("audit.log"), self.audit_text())?;
        std::fs::write(dir.join("telematics.ndrec"), &self.telematics)?;
        std::fs::write(dir.join("report.json"), self.report_text())
    }
}

struct World<'a> {
    sc: &'a Scenario,
    kernel: Kernel<Payload>,
    bus: Bus,
    nodes: Vec<EcuNode>,
    monitor: Monitor,
    escalation: Escalation,
    log: Vec<LogLine>,
    seq: Option<u64>,
}

/// Run `scenario` from t = 0 to its horizon (inclusive).
pub fn run(scenario: &Scenario) -> Result<RunOutput, RunError> {
    scenario.validate()?;
    let mut w = World::new(scenario)?;
    let horizon = scenario.horizon;
    while let Some(ev) = w.kernel.pop_until(horizon) {
        w.dispatch(ev)?;
    }
    w.kernel.advance_to(horizon);
    w.seq = None;
    let frames_delivered = w.bus.delivered().len() as u64;
    let frames_pending = w.bus.pending_len() as u64 + u64::from(w.bus.is_busy());
    w.record(Entry::End { frames_delivered, frames_pending });

    let audit = w.escalation.audit().to_vec();
    let report = metrics::compute(scenario, &w.log, &audit);
    Ok(RunOutput {
        scenario: scenario.clone(),
        telematics: w.escalation.telematics().wire_text(),
        display: w.escalation.display_transcript().to_vec(),
        driver: w.escalation.driver_notifications().to_vec(),
        log: w.log,
        audit,
        report,
    })
}

impl<'a> World<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, RunError> {
        let mut kernel = Kernel::new(sc.seed);
        let mut bus = Bus::new(sc.bus)?;
        bus.register(NodeId::MONITOR, vec![POLL_ID..=POLL_ID, CORRECTIVE_ID..=CORRECTIVE_ID])?;
        let mut nodes = Vec::with_capacity(usize::from(sc.fleet_size));
        for ecu in EcuId::fleet(sc.fleet_size) {
            let id = protocol::response_id(ecu);
            bus.register(ecu.node(), vec![id..=id])?;
            nodes.push(EcuNode::new(ecu, sc.processing_delay_of(ecu)));
        }
        if let Some(bg) = &sc.background {
            bus.register(NodeId::BACKGROUND, vec![bg.id_min..=bg.id_max])?;
        }
        let mut monitor = Monitor::new(sc.monitor.clone())?;
        monitor.start(&mut kernel, sc.horizon);
        for (i, f) in sc.faults.iter().enumerate() {
            kernel.schedule(f.at, Target::Injector, Payload::Inject(i)).expect("validated fault time");
        }
        if sc.status.interval <= sc.horizon {
            kernel.schedule(sc.status.interval, Target::Telematics, Payload::StatusDue).expect("future");
        }
        let mut w = World {
            sc,
            kernel,
            bus,
            nodes,
            monitor,
            escalation: Escalation::new(sc.telematics.clone()),
            log: Vec::new(),
            seq: None,
        };
        w.record(Entry::Header { seed: sc.seed, scenario: Box::new(sc.clone()) });
        w.schedule_background();
        Ok(w)
    }

    fn record(&mut self, entry: Entry) {
        self.log.push(LogLine { t_us: self.kernel.now().as_micros(), seq: self.seq, entry });
    }

    fn node(&mut self, ecu: EcuId) -> &mut EcuNode {
        &mut self.nodes[usize::from(ecu.get()) - 1]
    }

    fn dispatch(&mut self, ev: Event<Payload>) -> Result<(), RunError> {
        self.seq = Some(ev.seq);
        match ev.payload {
            Payload::Bus(b) => match self.bus.handle(&mut self.kernel, b)? {
                BusOutput::Started(tx) => self.record(Entry::TxStart {
                    id: tx.frame.id().raw(),
                    dlc: tx.frame.dlc(),
                    sender: tx.frame.sender().0,
                    submitted_us: tx.submitted_at.as_micros(),
                }),
                BusOutput::Delivered(tx) => {
                    self.record(Entry::Deliver {
                        id: tx.frame.id().raw(),
                        dlc: tx.frame.dlc(),
                        sender: tx.frame.sender().0,
                        start_us: tx.start.as_micros(),
                    });
                    self.deliver(&tx.frame)?;
                }
                BusOutput::Idle => {}
            },
            Payload::Node(NodeEvent { ecu }) => {
                if let Some(frame) = self.node(ecu).on_timer() {
                    self.submit(frame)?;
                }
            }
            Payload::Monitor(m) => {
                let actions = self.monitor.handle(&mut self.kernel, m);
                self.apply(actions)?;
            }
            Payload::Inject(i) => self.inject(i)?,
            Payload::Recover(i) => {
                let ecu = self.sc.faults[i].ecu;
                let applied = self.node(ecu).recover(i);
                self.record(Entry::Recover { index: i, ecu, applied });
            }
            Payload::StatusDue => self.status(),
            Payload::Background => {
                self.background_frame()?;
                self.schedule_background();
            }
        }
        Ok(())
    }

    fn submit(&mut self, frame: Frame) -> Result<(), RunError> {
        self.record(Entry::Submit { id: frame.id().raw(), dlc: frame.dlc(), sender: frame.sender().0 });
        self.bus.submit(&mut self.kernel, frame)?;
        Ok(())
    }

    fn deliver(&mut self, frame: &Frame) -> Result<(), RunError> {
        match frame.id().raw() {
            POLL_ID => {
                for i in 0..self.nodes.len() {
                    let ecu = self.nodes[i].id();
                    if self.nodes[i].on_poll(&mut self.kernel, frame) == PollOutcome::Malformed {
                        self.record(Entry::MalformedPoll { ecu });
                    }
                }
            }
            CORRECTIVE_ID => {
                for i in 0..self.nodes.len() {
                    let ecu = self.nodes[i].id();
                    let outcome = match self.nodes[i].apply_corrective(frame) {
                        CorrectiveOutcome::NotAddressed => continue,
                        CorrectiveOutcome::Cleared(_) => CorrectiveResult::Cleared,
                        CorrectiveOutcome::Persisted(_) => CorrectiveResult::Persisted,
                        CorrectiveOutcome::NoOp => CorrectiveResult::Noop,
                        CorrectiveOutcome::Lost => CorrectiveResult::Lost,
                    };
                    self.record(Entry::CorrectiveRx { ecu, outcome });
                }
            }
            _ => {
                if protocol::parse_response(frame).is_some() {
                    let actions = self.monitor.on_response(&mut self.kernel, frame);
                    self.apply(actions)?;
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, actions: Vec<MonitorAction>) -> Result<(), RunError> {
        for a in actions {
            match a {
                MonitorAction::Poll { ecu, attempt, frame } => {
                    self.record(Entry::Poll { ecu, attempt });
                    self.submit(frame)?;
                }
                MonitorAction::Corrective { ecu, frame } => {
                    self.record(Entry::CorrectiveSent { ecu });
                    self.submit(frame)?;
                }
                MonitorAction::Response { ecu, status } => self.record(Entry::Response { ecu, status }),
                MonitorAction::Stale { ecu, status } => self.record(Entry::Stale { ecu, status }),
                MonitorAction::Missed { ecu, misses } => self.record(Entry::Missed { ecu, misses }),
                MonitorAction::Assess { ecu, from, to } => self.record(Entry::Assess { ecu, from, to }),
                MonitorAction::Escalate { ecu, kind, reason } => {
                    let now = self.kernel.now();
                    if let Some(out) = self.escalation.raise(now, ecu, kind, reason, self.kernel.rng()) {
                        self.record_send(WireType::Fault, now, out);
                    }
                }
            }
        }
        Ok(())
    }

    fn record_send(&mut self, record: WireType, origin: SimTime, out: SendOutcome) {
        let (delivered, arrive_us, attempts) = match out {
            SendOutcome::Delivered { arrive_at, attempts } => (true, Some(arrive_at.as_micros()), attempts),
            SendOutcome::Lost { attempts } => (false, None, attempts),
        };
        self.record(Entry::Telematics { record, origin_us: origin.as_micros(), delivered, arrive_us, attempts });
    }

    fn inject(&mut self, i: usize) -> Result<(), RunError> {
        let f = self.sc.faults[i];
        let outcome = {
            let node = &mut self.nodes[usize::from(f.ecu.get()) - 1];
            node.inject(&mut self.kernel, f.kind, i)?
        };
        let applied = matches!(outcome, InjectOutcome::Applied { .. });
        self.record(Entry::Fault {
            index: i,
            ecu: f.ecu,
            fault: f.kind,
            duration_us: f.duration.map(SimTime::as_micros),
            applied,
        });
        if !applied {
            return Ok(());
        }
        if f.kind == crate::ecu::FaultKind::FailSilent {
            let w = self.bus.withdraw(&mut self.kernel, f.ecu.node());
            for frame in w.discarded {
                self.record(Entry::Discard { id: frame.id().raw(), sender: frame.sender().0 });
            }
            if let Some(tx) = w.aborted {
                self.record(Entry::TxAbort {
                    id: tx.frame.id().raw(),
                    sender: tx.frame.sender().0,
                    start_us: tx.start.as_micros(),
                });
            }
        }
        if let Some(d) = f.duration {
            if let Some(at) = self.kernel.now().checked_add(d).filter(|t| *t <= self.sc.horizon) {
                self.kernel.schedule(at, Target::Injector, Payload::Recover(i)).expect("future");
            }
        }
        Ok(())
    }

    fn status(&mut self) {
        let now = self.kernel.now();
        let report = self.sc.status.report_at(now, self.sc.fleet_size, self.monitor.counts());
        self.record(Entry::Status {
            ok: report.ok,
            degraded: report.degraded,
            unresponsive: report.unresponsive,
            pos_m: report.odometer_m,
        });
        let out = self.escalation.report_status(&report, self.kernel.rng());
        self.record_send(WireType::Status, now, out);
        if let Some(next) = now.checked_add(self.sc.status.interval).filter(|t| *t <= self.sc.horizon) {
            self.kernel.schedule(next, Target::Telematics, Payload::StatusDue).expect("future");
        }
    }

    fn schedule_background(&mut self) {
        let Some(bg) = &self.sc.background else { return };
        if bg.frames_per_s <= 0.0 {
            return;
        }
        let rate = bg.frames_per_s;
        let u = self.kernel.rng_next(BACKGROUND_STREAM);
        // exponential inter-arrival, at least 1us so time always advances
        let gap_us = ((-(1.0 - u).ln() / rate) * 1e6).round().max(1.0);
        let gap = SimTime::from_micros(gap_us.min(u64::MAX as f64 / 2.0) as u64);
        if let Some(at) = self.kernel.now().checked_add(gap).filter(|t| *t < self.sc.horizon) {
            self.kernel.schedule(at, Target::Background, Payload::Background).expect("future");
        }
    }

    fn background_frame(&mut self) -> Result<(), RunError> {
        let bg = self.sc.background.as_ref().expect("background event without traffic");
        let (lo, hi, dlc) = (bg.id_min, bg.id_max, usize::from(bg.dlc));
        let rng = self.kernel.rng().stream(BACKGROUND_STREAM);
        let id = rng.random_range(lo..=hi);
        let mut data = [0u8; 8];
        rng.fill(&mut data[..dlc]);
        let frame = Frame::new(id, &data[..dlc], NodeId::BACKGROUND)?;
        self.submit(frame)
    }
}
