//! Post-run checks over the event log and audit trail.
//!
//! Each check returns human-readable violations prefixed with the property
//! name. An empty list means the run is clean.

use std::collections::BTreeMap;

use crate::canbus::{frame_bits, BusConfig};
use crate::ecu::{EcuId, FaultKind};
use crate::escalation::{EscalationEvent, EscalationKind, Reason};
use crate::monitor::Assessment;

use super::log::{CorrectiveResult, Entry, LogLine};
use super::scenario::Scenario;

pub fn check(sc: &Scenario, log: &[LogLine], audit: &[EscalationEvent]) -> Vec<String> {
    let mut v = Vec::new();
    v.extend(ordering(log, audit));
    v.extend(bus_replay(&sc.bus, log));
    v.extend(silence(log));
    v.extend(assessment_discipline(sc, log));
    v.extend(soundness(sc, log, audit));
    v.extend(dedup(log, audit));
    v.extend(status_reports(sc, log));
    v
}

/// `(t_us, seq)` never decreases and the audit trail is in time order.
pub fn ordering(log: &[LogLine], audit: &[EscalationEvent]) -> Vec<String> {
    let mut v = Vec::new();
    let mut last: Option<(u64, u64)> = None;
    let mut last_t = 0;
    for (i, l) in log.iter().enumerate() {
        if l.t_us < last_t {
            v.push(format!("ordering: line {} goes back in time ({} < {})", i + 1, l.t_us, last_t));
        }
        last_t = l.t_us;
        if let Some(seq) = l.seq {
            if let Some(prev) = last {
                if (l.t_us, seq) < prev {
                    v.push(format!("ordering: line {} has (t, seq) = ({}, {seq}) after {prev:?}", i + 1, l.t_us));
                }
            }
            last = Some((l.t_us, seq));
        }
    }
    if audit.windows(2).any(|w| w[1].at < w[0].at) {
        v.push("ordering: audit trail is not in time order".into());
    }
    v
}

/// Replays the bus from the log: every transmission must be the pending
/// frame with the lowest identifier (FIFO among equal identifiers), start as
/// soon as the bus allows, and last exactly its worst-case frame time.
pub fn bus_replay(cfg: &BusConfig, log: &[LogLine]) -> Vec<String> {
    let mut v = Vec::new();
    let gap = cfg.bits_to_time(cfg.gap_bits).as_micros();
    // (id, submit ordinal) -> (sender, submitted_us)
    let mut pending: BTreeMap<(u16, u64), (u8, u64)> = BTreeMap::new();
    let mut ordinal = 0u64;
    let mut in_flight: Option<(u16, u8, u8, u64)> = None;
    let mut idle_from = 0u64;
    for l in log {
        let t = l.t_us;
        match l.entry {
            Entry::Submit { id, sender, .. } => {
                pending.insert((id, ordinal), (sender, t));
                ordinal += 1;
            }
            Entry::TxStart { id, dlc, sender, submitted_us } => {
                if in_flight.is_some() {
                    v.push(format!("bus: frame {id:#05x} started at {t}us while another was on the wire"));
                }
                let Some((&key, &(want_sender, want_sub))) = pending.iter().next() else {
                    v.push(format!("bus: frame {id:#05x} started at {t}us with nothing pending"));
                    continue;
                };
                if key.0 != id || want_sender != sender || want_sub != submitted_us {
                    v.push(format!(
                        "priority: {id:#05x} from node {sender} won at {t}us but {:#05x} from node {want_sender} was pending",
                        key.0
                    ));
                }
                let earliest = pending.values().map(|p| p.1).min().unwrap_or(t);
                let expect = idle_from.max(earliest);
                if t != expect {
                    v.push(format!("bus: frame {id:#05x} started at {t}us, expected {expect}us"));
                }
                pending.remove(&key);
                in_flight = Some((id, sender, dlc, t));
            }
            Entry::Deliver { id, dlc, sender, start_us } => {
                match in_flight.take() {
                    Some((fid, fs, _, fstart)) if fid == id && fs == sender && fstart == start_us => {}
                    _ => v.push(format!("bus: delivery of {id:#05x} at {t}us does not match the frame on the wire")),
                }
                let want = cfg.bits_to_time(frame_bits(dlc).unwrap_or(0)).as_micros();
                if t.checked_sub(start_us) != Some(want) {
                    v.push(format!(
                        "timing: {id:#05x} took {}us on the wire, expected {want}us",
                        t.saturating_sub(start_us)
                    ));
                }
                idle_from = t + gap;
            }
            Entry::TxAbort { id, sender, start_us } => {
                match in_flight.take() {
                    Some((fid, fs, _, fstart)) if fid == id && fs == sender && fstart == start_us => {}
                    _ => v.push(format!("bus: abort of {id:#05x} at {t}us does not match the frame on the wire")),
                }
                idle_from = t + gap;
            }
            Entry::Discard { id, sender } => {
                let key = pending.iter().find(|(k, p)| k.0 == id && p.0 == sender).map(|(k, _)| *k);
                match key {
                    Some(k) => {
                        pending.remove(&k);
                    }
                    None => v.push(format!("bus: discard of {id:#05x} from node {sender} that was not pending")),
                }
            }
            _ => {}
        }
    }
    v
}

/// A fail-silent node puts nothing on the bus until it recovers.
pub fn silence(log: &[LogLine]) -> Vec<String> {
    let mut v = Vec::new();
    let mut failed: BTreeMap<EcuId, usize> = BTreeMap::new();
    for l in log {
        match l.entry {
            Entry::Fault { index, ecu, fault: FaultKind::FailSilent, applied: true, .. } => {
                failed.insert(ecu, index);
            }
            Entry::Fault { ecu, applied: true, .. } => {
                failed.remove(&ecu);
            }
            Entry::Recover { index, ecu, applied: true } if failed.get(&ecu) == Some(&index) => {
                failed.remove(&ecu);
            }
            Entry::Submit { sender, id, .. }
            | Entry::TxStart { sender, id, .. }
            | Entry::Deliver { sender, id, .. }
                if failed.keys().any(|e| e.get() == sender) =>
            {
                v.push(format!("silence: failed node {sender} sent {id:#05x} at {}us", l.t_us));
            }
            _ => {}
        }
    }
    v
}

/// Assessment changes chain correctly and are backed by evidence from the
/// same event.
pub fn assessment_discipline(sc: &Scenario, log: &[LogLine]) -> Vec<String> {
    let mut v = Vec::new();
    let mut state: BTreeMap<EcuId, Assessment> = EcuId::fleet(sc.fleet_size).map(|e| (e, Assessment::Ok)).collect();
    let limit = sc.monitor.retries + 1;
    for (i, l) in log.iter().enumerate() {
        let Entry::Assess { ecu, from, to } = l.entry else { continue };
        let cur = state.get(&ecu).copied();
        if cur != Some(from) {
            v.push(format!("assessment: ecu {ecu} left {from:?} but was {cur:?} (line {})", i + 1));
        }
        if from == to {
            v.push(format!("assessment: ecu {ecu} self-transition {from:?} (line {})", i + 1));
        }
        // evidence is logged just before the change, by the same event
        let evidence = log[..i].iter().rev().take_while(|p| p.seq == l.seq && p.t_us == l.t_us).any(|p| {
            match (p.entry.clone(), to) {
                (Entry::Response { ecu: e, status: 0 }, Assessment::Ok) => e == ecu,
                (Entry::Response { ecu: e, status }, Assessment::Degraded(c)) => e == ecu && status == c,
                (Entry::Missed { ecu: e, misses }, Assessment::Unresponsive) => e == ecu && misses == limit,
                _ => false,
            }
        });
        if !evidence {
            v.push(format!("assessment: ecu {ecu} moved to {to:?} without evidence (line {})", i + 1));
        }
        state.insert(ecu, to);
    }
    v
}

/// Every escalation is backed by a fault that was active on that ECU during
/// the evidence window `[t - retry chain, t]`.
pub fn soundness(sc: &Scenario, log: &[LogLine], audit: &[EscalationEvent]) -> Vec<String> {
    // per ECU: list of (start, end) fault intervals
    let mut active: BTreeMap<EcuId, (u64, Option<usize>)> = BTreeMap::new();
    let mut intervals: BTreeMap<EcuId, Vec<(u64, u64)>> = BTreeMap::new();
    let close = |active: &mut BTreeMap<EcuId, (u64, Option<usize>)>,
                 intervals: &mut BTreeMap<EcuId, Vec<(u64, u64)>>,
                 ecu: EcuId,
                 t: u64| {
        if let Some((start, _)) = active.remove(&ecu) {
            intervals.entry(ecu).or_default().push((start, t));
        }
    };
    for l in log {
        match l.entry {
            Entry::Fault { index, ecu, applied: true, .. } => {
                let start = active.get(&ecu).map_or(l.t_us, |a| a.0);
                active.insert(ecu, (start, Some(index)));
            }
            Entry::Recover { index, ecu, applied: true } if active.get(&ecu).map(|a| a.1) == Some(Some(index)) => {
                close(&mut active, &mut intervals, ecu, l.t_us);
            }
            Entry::CorrectiveRx { ecu, outcome: CorrectiveResult::Cleared } => {
                close(&mut active, &mut intervals, ecu, l.t_us);
            }
            _ => {}
        }
    }
    for (ecu, (start, _)) in active {
        intervals.entry(ecu).or_default().push((start, u64::MAX));
    }
    let chain = sc.monitor.retry_chain().as_micros();
    audit
        .iter()
        .filter(|e| {
            let t = e.at.as_micros();
            let lo = t.saturating_sub(chain);
            !intervals.get(&e.ecu).is_some_and(|iv| iv.iter().any(|&(s, end)| s <= t && end >= lo))
        })
        .map(|e| format!("soundness: {:?} for ecu {} at {}us with no active fault", e.kind, e.ecu, e.at.as_micros()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Cause {
    Unresponsive,
    Code(u8),
}

fn cause(reason: Reason) -> Cause {
    match reason {
        Reason::Unresponsive => Cause::Unresponsive,
        Reason::Major(c) | Reason::PersistentMinor(c) | Reason::Minor(c) => Cause::Code(c),
    }
}

/// A driver notification for a cause is not repeated until the ECU has been
/// seen healthy again.
pub fn dedup(log: &[LogLine], audit: &[EscalationEvent]) -> Vec<String> {
    let mut healthy_at: BTreeMap<EcuId, Vec<u64>> = BTreeMap::new();
    for l in log {
        if let Entry::Assess { ecu, to: Assessment::Ok, .. } = l.entry {
            healthy_at.entry(ecu).or_default().push(l.t_us);
        }
    }
    let mut last: BTreeMap<(EcuId, Cause), u64> = BTreeMap::new();
    let mut v = Vec::new();
    for e in audit.iter().filter(|e| e.kind == EscalationKind::DriverNotification) {
        let key = (e.ecu, cause(e.reason));
        let t = e.at.as_micros();
        if let Some(&prev) = last.get(&key) {
            let reset = healthy_at.get(&e.ecu).is_some_and(|hs| hs.iter().any(|&h| h > prev && h <= t));
            if !reset {
                v.push(format!("dedup: ecu {} notified twice for {:?} ({prev}us, {t}us)", e.ecu, key.1));
            }
        }
        last.insert(key, t);
    }
    v
}

/// Status reports fire at every multiple of the interval up to the horizon
/// and account for the whole fleet.
pub fn status_reports(sc: &Scenario, log: &[LogLine]) -> Vec<String> {
    let mut v = Vec::new();
    let interval = sc.status.interval.as_micros();
    let mut k = 0u64;
    for l in log {
        if let Entry::Status { ok, degraded, unresponsive, .. } = l.entry {
            k += 1;
            if l.t_us != interval * k {
                v.push(format!("status: report {k} at {}us, expected {}us", l.t_us, interval * k));
            }
            if ok + degraded + unresponsive != u32::from(sc.fleet_size) {
                v.push(format!("status: report at {}us counts {} ECUs", l.t_us, ok + degraded + unresponsive));
            }
        }
    }
    let expected = sc.horizon.as_micros() / interval;
    if k != expected {
        v.push(format!("status: {k} reports, expected {expected}"));
    }
    v
}
