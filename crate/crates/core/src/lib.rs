//! Discrete-event simulation of a health-monitoring ECU supervising a fleet of
//! ECUs over a shared CAN bus.
//!
//! The building blocks are usable on their own:
//!
//! * [`simcore`]: event kernel, simulated clock and seeded random streams.
//! * [`canbus`]: frame timing and priority arbitration on a single segment.
//! * [`ecu`]: nodes that answer polls and carry injected faults.
//! * [`monitor`]: the polling, retry and assessment logic.
//! * [`escalation`]: display, driver and service-station sinks plus the
//!   telematics link.
//! * [`harness`]: scenario files, full runs, logs, metrics and sweeps.

pub mod canbus;
pub mod ecu;
pub mod escalation;
pub mod harness;
pub mod monitor;
pub mod protocol;
pub mod simcore;

pub use canbus::{Bus, BusConfig, Frame, NodeId};
pub use ecu::{EcuId, EcuNode, FaultKind};
pub use escalation::{EscalationEvent, EscalationKind, Reason};
pub use harness::scenario::{load_scenario, parse_scenario, Scenario};
pub use harness::world::{run, RunOutput};
pub use monitor::{detection_bound, Monitor, MonitorConfig};
pub use simcore::{Kernel, SimTime};
