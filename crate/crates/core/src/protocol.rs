//! Byte layouts of the health-monitoring frames.
//!
//! | frame      | id            | dlc | payload             |
//! |------------|---------------|-----|---------------------|
//! | poll       | `0x080`       | 1   | `[ecu]`             |
//! | response   | `0x100 + ecu` | 2   | `[ecu, status]`     |
//! | corrective | `0x090`       | 2   | `[ecu, 0x01]`       |
//!
//! A status of `0x00` is an ACK; anything else is a NACK carrying the error
//! code.

use crate::canbus::{Frame, NodeId};
use crate::ecu::EcuId;

pub const POLL_ID: u16 = 0x080;
pub const CORRECTIVE_ID: u16 = 0x090;
pub const RESPONSE_BASE: u16 = 0x100;
pub const STATUS_ACK: u8 = 0x00;
pub const CORRECTIVE_RESET: u8 = 0x01;

pub fn response_id(ecu: EcuId) -> u16 {
    RESPONSE_BASE + u16::from(ecu.get())
}

pub fn poll_frame(ecu: EcuId) -> Frame {
    Frame::new(POLL_ID, &[ecu.get()], NodeId::MONITOR).expect("static layout")
}

pub fn corrective_frame(ecu: EcuId) -> Frame {
    Frame::new(CORRECTIVE_ID, &[ecu.get(), CORRECTIVE_RESET], NodeId::MONITOR).expect("static layout")
}

pub fn response_frame(ecu: EcuId, status: u8) -> Frame {
    Frame::new(response_id(ecu), &[ecu.get(), status], ecu.node()).expect("static layout")
}

/// `Some((ecu, status))` for a well-formed response frame.
pub fn parse_response(frame: &Frame) -> Option<(EcuId, u8)> {
    let id = frame.id().raw();
    if !(RESPONSE_BASE..RESPONSE_BASE + 0x100).contains(&id) || frame.dlc() != 2 {
        return None;
    }
    let p = frame.payload();
    let ecu = EcuId::new(p[0]).ok()?;
    (response_id(ecu) == id).then_some((ecu, p[1]))
}

/// True for identifiers used by the health protocol in a fleet of `n` ECUs.
pub fn is_health_id(id: u16, n: u8) -> bool {
    id == POLL_ID || id == CORRECTIVE_ID || (RESPONSE_BASE + 1..=RESPONSE_BASE + u16::from(n)).contains(&id)
}
