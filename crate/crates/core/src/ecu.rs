//! Simulated application ECU: answers health polls from its self-test verdict.
//!
//! The self-test result is ground truth injected by the scenario. A node in
//! [`HealthState::Failed`] is fail-silent: it sends nothing, and anything it
//! had queued is dropped at the instant of failure.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canbus::{Frame, NodeId};
use crate::protocol::{self, CORRECTIVE_ID, CORRECTIVE_RESET, POLL_ID, STATUS_ACK};
use crate::simcore::{Classify, EventHandle, EventKind, Kernel, SimTime, Target};

pub const MAX_FLEET: u8 = 80;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EcuError {
    #[error("ECU id {0} outside 1..={MAX_FLEET}")]
    BadId(u8),
    #[error("error code {0:#04x} is reserved")]
    ReservedCode(u8),
    #[error("error code {code:#04x} is not a {expected:?} code")]
    WrongSeverity { code: u8, expected: Severity },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct EcuId(u8);

impl EcuId {
    pub fn new(raw: u8) -> Result<Self, EcuError> {
        if raw == 0 || raw > MAX_FLEET {
            return Err(EcuError::BadId(raw));
        }
        Ok(EcuId(raw))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn node(self) -> NodeId {
        NodeId(self.0)
    }

    /// `1..=n`, ascending.
    pub fn fleet(n: u8) -> impl Iterator<Item = EcuId> {
        (1..=n.min(MAX_FLEET)).map(EcuId)
    }
}

impl TryFrom<u8> for EcuId {
    type Error = EcuError;

    fn try_from(raw: u8) -> Result<Self, EcuError> {
        EcuId::new(raw)
    }
}

impl From<EcuId> for u8 {
    fn from(e: EcuId) -> u8 {
        e.0
    }
}

impl fmt::Display for EcuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Major,
}

/// Self-test error code. `0x01..=0x7F` are minor, `0x80..=0xFE` major;
/// `0x00` means "no error" and `0xFF` is unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorCode {
    code: u8,
    recoverable: bool,
}

impl ErrorCode {
    pub fn new(code: u8, recoverable: bool) -> Result<Self, EcuError> {
        if code == 0x00 || code == 0xFF {
            return Err(EcuError::ReservedCode(code));
        }
        Ok(ErrorCode { code, recoverable })
    }

    pub fn minor(code: u8, recoverable: bool) -> Result<Self, EcuError> {
        let c = ErrorCode::new(code, recoverable)?;
        if c.severity() != Severity::Minor {
            return Err(EcuError::WrongSeverity { code, expected: Severity::Minor });
        }
        Ok(c)
    }

    pub fn major(code: u8) -> Result<Self, EcuError> {
        let c = ErrorCode::new(code, false)?;
        if c.severity() != Severity::Major {
            return Err(EcuError::WrongSeverity { code, expected: Severity::Major });
        }
        Ok(c)
    }

    pub fn code(self) -> u8 {
        self.code
    }

    pub fn recoverable(self) -> bool {
        self.recoverable
    }

    pub fn severity(self) -> Severity {
        severity_of(self.code)
    }
}

pub fn severity_of(code: u8) -> Severity {
    if code < 0x80 {
        Severity::Minor
    } else {
        Severity::Major
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HealthState {
    Healthy,
    /// Exactly one active self-test error.
    Faulty(ErrorCode),
    /// Fail-silent.
    Failed,
}

/// What a scenario can do to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Minor { code: u8, recoverable: bool },
    Major { code: u8 },
    FailSilent,
}

impl FaultKind {
    pub fn target_state(self) -> Result<HealthState, EcuError> {
        Ok(match self {
            FaultKind::Minor { code, recoverable } => HealthState::Faulty(ErrorCode::minor(code, recoverable)?),
            FaultKind::Major { code } => HealthState::Faulty(ErrorCode::major(code)?),
            FaultKind::FailSilent => HealthState::Failed,
        })
    }

    pub fn code(self) -> Option<u8> {
        match self {
            FaultKind::Minor { code, .. } | FaultKind::Major { code } => Some(code),
            FaultKind::FailSilent => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeEvent {
    pub ecu: EcuId,
}

impl Classify for NodeEvent {
    fn kind(&self) -> EventKind {
        EventKind::TimerExpiry
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeDiagnostics {
    pub malformed_polls: u32,
    pub ignored_injections: u32,
    pub dropped_correctives: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollOutcome {
    /// Response queued; it goes on the bus once the processing delay expires.
    Queued {
        status: u8,
        submit_at: SimTime,
    },
    Silent,
    NotAddressed,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectOutcome {
    Applied {
        previous: HealthState,
        dropped_response: bool,
    },
    /// The node was already fail-silent.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectiveOutcome {
    Cleared(ErrorCode),
    Persisted(ErrorCode),
    NoOp,
    Lost,
    NotAddressed,
}

pub struct EcuNode {
    id: EcuId,
    state: HealthState,
    processing_delay: SimTime,
    queued: Option<(Frame, EventHandle)>,
    // ordinal of the injection responsible for the current state
    cause: Option<usize>,
    diagnostics: NodeDiagnostics,
}

impl EcuNode {
    pub const DEFAULT_PROCESSING_DELAY: SimTime = SimTime::from_micros(200);

    pub fn new(id: EcuId, processing_delay: SimTime) -> Self {
        EcuNode {
            id,
            state: HealthState::Healthy,
            processing_delay,
            queued: None,
            cause: None,
            diagnostics: NodeDiagnostics::default(),
        }
    }

    pub fn id(&self) -> EcuId {
        self.id
    }

    pub fn state(&self) -> HealthState {
        self.state
    }

    pub fn diagnostics(&self) -> NodeDiagnostics {
        self.diagnostics
    }

    pub fn has_queued_response(&self) -> bool {
        self.queued.is_some()
    }

    /// Self-test verdict as it would appear in a response status byte.
    pub fn status_byte(&self) -> Option<u8> {
        match self.state {
            HealthState::Healthy => Some(STATUS_ACK),
            HealthState::Faulty(c) => Some(c.code()),
            HealthState::Failed => None,
        }
    }

    pub fn on_poll<P>(&mut self, kernel: &mut Kernel<P>, frame: &Frame) -> PollOutcome
    where
        P: Classify + From<NodeEvent>,
    {
        if frame.id().raw() != POLL_ID {
            return PollOutcome::NotAddressed;
        }
        if self.state == HealthState::Failed {
            return PollOutcome::Silent;
        }
        if frame.dlc() != 1 {
            self.diagnostics.malformed_polls += 1;
            return PollOutcome::Malformed;
        }
        if frame.payload()[0] != self.id.get() {
            return PollOutcome::NotAddressed;
        }
        let status = self.status_byte().expect("not failed");
        let response = protocol::response_frame(self.id, status);
        if let Some((_, h)) = self.queued.take() {
            kernel.cancel(h);
        }
        let h =
            kernel.schedule_in(self.processing_delay, Target::Ecu(self.id.get()), NodeEvent { ecu: self.id }.into());
        self.queued = Some((response, h));
        PollOutcome::Queued { status, submit_at: h.at() }
    }

    /// Processing delay expired: hand the queued response to the bus.
    pub fn on_timer(&mut self) -> Option<Frame> {
        self.queued.take().map(|(f, _)| f)
    }

    pub fn inject<P>(
        &mut self,
        kernel: &mut Kernel<P>,
        fault: FaultKind,
        cause: usize,
    ) -> Result<InjectOutcome, EcuError>
    where
        P: Classify,
    {
        let target = fault.target_state()?;
        if self.state == HealthState::Failed {
            self.diagnostics.ignored_injections += 1;
            return Ok(InjectOutcome::Ignored);
        }
        let previous = self.state;
        let mut dropped_response = false;
        if target == HealthState::Failed {
            if let Some((_, h)) = self.queued.take() {
                kernel.cancel(h);
                dropped_response = true;
            }
        }
        self.state = target;
        self.cause = Some(cause);
        Ok(InjectOutcome::Applied { previous, dropped_response })
    }

    /// End of a transient fault. Only takes effect if `cause` is still the
    /// reason for the current state.
    pub fn recover(&mut self, cause: usize) -> bool {
        if self.cause != Some(cause) || self.state == HealthState::Healthy {
            return false;
        }
        self.state = HealthState::Healthy;
        self.cause = None;
        true
    }

    pub fn apply_corrective(&mut self, frame: &Frame) -> CorrectiveOutcome {
        let p = frame.payload();
        if frame.id().raw() != CORRECTIVE_ID || frame.dlc() != 2 || p[0] != self.id.get() || p[1] != CORRECTIVE_RESET {
            return CorrectiveOutcome::NotAddressed;
        }
        match self.state {
            HealthState::Failed => {
                self.diagnostics.dropped_correctives += 1;
                CorrectiveOutcome::Lost
            }
            HealthState::Healthy => CorrectiveOutcome::NoOp,
            HealthState::Faulty(code) if code.recoverable() => {
                self.state = HealthState::Healthy;
                self.cause = None;
                CorrectiveOutcome::Cleared(code)
            }
            HealthState::Faulty(code) => CorrectiveOutcome::Persisted(code),
        }
    }
}
