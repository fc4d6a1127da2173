//! Everything needed to run scenarios end to end and judge the results.

pub mod cli;
pub mod invariants;
pub mod log;
pub mod metrics;
pub mod scenario;
pub mod sweep;
pub mod world;
