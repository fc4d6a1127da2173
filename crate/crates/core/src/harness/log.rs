//! The `events.log` format: one JSON object per line.
//!
//! Every line carries the simulated time `t_us`, the kernel sequence number
//! `seq` of the event that produced it (absent for the header and trailer)
//! and an `ev` tag. Lines appear in processing order, so `(t_us, seq)` never
//! decreases.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecu::{EcuId, FaultKind};
use crate::escalation::{EscalationEvent, WireType};
use crate::monitor::Assessment;

use super::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub t_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(flatten)]
    pub entry: Entry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectiveResult {
    Cleared,
    Persisted,
    Noop,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Entry {
    Header {
        seed: u64,
        scenario: Box<Scenario>,
    },
    /// A frame entered a node's transmit queue.
    Submit {
        id: u16,
        dlc: u8,
        sender: u8,
    },
    /// A frame won arbitration and went onto the wire.
    TxStart {
        id: u16,
        dlc: u8,
        sender: u8,
        submitted_us: u64,
    },
    /// A frame finished and was received by every node.
    Deliver {
        id: u16,
        dlc: u8,
        sender: u8,
        start_us: u64,
    },
    /// The sender went silent mid-frame.
    TxAbort {
        id: u16,
        sender: u8,
        start_us: u64,
    },
    /// A queued frame was dropped because its sender went silent.
    Discard {
        id: u16,
        sender: u8,
    },
    Poll {
        ecu: EcuId,
        attempt: u32,
    },
    Response {
        ecu: EcuId,
        status: u8,
    },
    /// A response that arrived with no poll outstanding.
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
    CorrectiveSent {
        ecu: EcuId,
    },
    CorrectiveRx {
        ecu: EcuId,
        outcome: CorrectiveResult,
    },
    MalformedPoll {
        ecu: EcuId,
    },
    Fault {
        index: usize,
        ecu: EcuId,
        fault: FaultKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_us: Option<u64>,
        applied: bool,
    },
    Recover {
        index: usize,
        ecu: EcuId,
        applied: bool,
    },
    Status {
        ok: u32,
        degraded: u32,
        unresponsive: u32,
        pos_m: u64,
    },
    Telematics {
        record: WireType,
        origin_us: u64,
        delivered: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arrive_us: Option<u64>,
        attempts: u32,
    },
    End {
        frames_delivered: u64,
        frames_pending: u64,
    },
}

#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub fn to_text(lines: &[LogLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("log line serializes"));
        s.push('\n');
    }
    s
}

/// Parse `events.log`. Blank lines are not allowed.
pub fn parse_events(text: &str) -> Result<Vec<LogLine>, ParseError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ParseError { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn parse_audit(text: &str) -> Result<Vec<EscalationEvent>, ParseError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ParseError { line: i + 1, message: e.to_string() }))
        .collect()
}
