//! Fault-onset sweeps: the same single-fault scenario run for every onset in
//! a range, in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::detection_bound;
use crate::simcore::SimTime;

use super::scenario::{Invalid, Scenario};
use super::world::{run, RunError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep step must be positive")]
    ZeroStep,
    #[error("empty onset range")]
    EmptyRange,
    #[error("the sweep template must contain exactly one fault, found {0}")]
    FaultCount(usize),
    #[error("invalid scenario: {0}")]
    Invalid(#[from] Invalid),
    #[error("run at onset {onset}: {source}")]
    Run { onset: SimTime, source: RunError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub onset_us: u64,
    pub latency_us: Option<u64>,
    pub driver_notifications: u64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: usize,
    pub detected: usize,
    pub min_latency_us: Option<u64>,
    pub max_latency_us: Option<u64>,
    pub mean_latency_us: Option<f64>,
    pub bound_us: u64,
    /// `bound - max`; how close the worst case came to the bound.
    pub slack_us: Option<i64>,
    pub violations: usize,
    pub points: Vec<SweepPoint>,
}

/// Onsets `start, start + step, …` strictly below `end`.
pub fn onsets(start: SimTime, end: SimTime, step: SimTime) -> Result<Vec<SimTime>, SweepError> {
    if step == SimTime::ZERO {
        return Err(SweepError::ZeroStep);
    }
    if end <= start {
        return Err(SweepError::EmptyRange);
    }
    let n = (end - start).as_micros().div_ceil(step.as_micros());
    Ok((0..n).map(|k| start + step * k).collect())
}

/// Run `template` once per onset with its single fault moved to that onset.
///
/// Each run's horizon is stretched, if needed, so that a fault at the onset
/// can be detected within the bound before the run ends.
pub fn sweep(template: &Scenario, start: SimTime, end: SimTime, step: SimTime) -> Result<SweepSummary, SweepError> {
    if template.faults.len() != 1 {
        return Err(SweepError::FaultCount(template.faults.len()));
    }
    let bound = detection_bound(&template.monitor);
    let points: Vec<SimTime> = onsets(start, end, step)?;
    let scenarios: Vec<Scenario> = points
        .iter()
        .map(|&onset| {
            let mut sc = template.clone();
            sc.faults[0].at = onset;
            let need = onset + bound + sc.monitor.deadline;
            sc.horizon = sc.horizon.max(need);
            sc.validate().map(|_| sc)
        })
        .collect::<Result<_, _>>()?;

    let results: Vec<SweepPoint> = scenarios
        .par_iter()
        .map(|sc| {
            let out = run(sc).map_err(|source| SweepError::Run { onset: sc.faults[0].at, source })?;
            let f = &out.report.faults[0];
            Ok(SweepPoint {
                onset_us: f.onset_us,
                latency_us: f.latency_us,
                driver_notifications: out.report.escalations.driver_notification,
                violations: out.report.violations.len(),
            })
        })
        .collect::<Result<_, SweepError>>()?;

    let lats: Vec<u64> = results.iter().filter_map(|p| p.latency_us).collect();
    let max = lats.iter().copied().max();
    Ok(SweepSummary {
        runs: results.len(),
        detected: lats.len(),
        min_latency_us: lats.iter().copied().min(),
        max_latency_us: max,
        mean_latency_us: (!lats.is_empty()).then(|| lats.iter().sum::<u64>() as f64 / lats.len() as f64),
        bound_us: bound.as_micros(),
        slack_us: max.map(|m| bound.as_micros() as i64 - m as i64),
        violations: results.iter().map(|p| p.violations).sum(),
        points: results,
    })
}
