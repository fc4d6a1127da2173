//! Scenario files (TOML) and their validation.
//!
//! ```toml
//! fleet_size = 4
//! horizon_s = 10.0
//! seed = 7                    # default 0
//!
//! [monitor]                   # all optional
//! period_ms = 1000
//! deadline_ms = 10
//! retries = 2
//! retry_spacing_ms = 10       # defaults to deadline_ms
//! poll_order = [1, 2, 3, 4]   # defaults to ascending
//! minor_escalation_threshold = 3
//!
//! [bus]
//! bitrate = 500000
//! gap_bits = 3
//!
//! [ecus]
//! processing_delay_us = 200
//! delay_overrides = [{ ecu = 3, processing_delay_us = 800 }]
//!
//! [background]
//! frames_per_s = 500.0
//! id_min = 0x400
//! id_max = 0x7FF
//! dlc = 8
//!
//! [telematics]
//! latency_ms = 0
//! loss_probability = 0.0
//! resend_attempts = 0
//! status_interval_s = 10.0
//! speed_mps = 20.0
//!
//! [[faults]]
//! at_s = 3.2
//! ecu = 2
//! kind = "fail_silent"        # or "minor" / "major" with `code`
//! duration_s = 3.0            # omit for a permanent fault
//! ```
//!
//! Loading is all-or-nothing: any unknown key, type mismatch or out-of-range
//! value rejects the whole file with the line and column of the culprit.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::canbus::{frame_bits, BusConfig, MAX_DLC, MAX_STD_ID};
use crate::ecu::{EcuId, EcuNode, FaultKind, MAX_FLEET};
use crate::escalation::{StatusConfig, TelematicsConfig};
use crate::monitor::MonitorConfig;
use crate::protocol::RESPONSE_BASE;
use crate::simcore::SimTime;

/// Longest accepted horizon, about 11.5 days of simulated time.
pub const MAX_HORIZON: SimTime = SimTime::from_secs(1_000_000);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ScenarioError {
    pub path: Option<String>,
    /// 1-based; 0 when the problem has no location (e.g. an I/O error).
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{p}:")?;
        }
        if self.line > 0 {
            write!(f, "{}:{}: ", self.line, self.column)?;
        } else if self.path.is_some() {
            f.write_str(" ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTraffic {
    pub frames_per_s: f64,
    pub id_min: u16,
    pub id_max: u16,
    pub dlc: u8,
}

impl BackgroundTraffic {
    /// Offered load as a fraction of bus capacity.
    pub fn offered_load(&self, bitrate: u32) -> f64 {
        let bits = frame_bits(self.dlc.min(MAX_DLC)).unwrap_or(0);
        self.frames_per_s * f64::from(bits) / f64::from(bitrate.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(rename = "at_us")]
    pub at: SimTime,
    pub ecu: EcuId,
    #[serde(flatten)]
    pub kind: FaultKind,
    /// `None` is permanent.
    #[serde(rename = "duration_us")]
    pub duration: Option<SimTime>,
}

/// A fully resolved, validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub fleet_size: u8,
    #[serde(rename = "horizon_us")]
    pub horizon: SimTime,
    pub seed: u64,
    pub monitor: MonitorConfig,
    pub bus: BusConfig,
    #[serde(rename = "processing_delay_us")]
    pub processing_delay: SimTime,
    #[serde(rename = "delay_overrides_us")]
    pub delay_overrides: BTreeMap<EcuId, SimTime>,
    pub background: Option<BackgroundTraffic>,
    pub telematics: TelematicsConfig,
    pub status: StatusConfig,
    pub faults: Vec<FaultSpec>,
}

/// Which part of a scenario a validation failure refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Culprit {
    Field(&'static str),
    Section(&'static str),
    Fault(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct Invalid {
    pub culprit: Culprit,
    pub message: String,
}

fn invalid(culprit: Culprit, message: impl Into<String>) -> Invalid {
    Invalid { culprit, message: message.into() }
}

impl Scenario {
    /// Defaults for `fleet_size` ECUs over `horizon`.
    pub fn new(fleet_size: u8, horizon: SimTime) -> Self {
        Scenario {
            fleet_size,
            horizon,
            seed: 0,
            monitor: MonitorConfig::for_fleet(fleet_size),
            bus: BusConfig::default(),
            processing_delay: EcuNode::DEFAULT_PROCESSING_DELAY,
            delay_overrides: BTreeMap::new(),
            background: None,
            telematics: TelematicsConfig::default(),
            status: StatusConfig::default(),
            faults: Vec::new(),
        }
    }

    pub fn with_fault(mut self, at: SimTime, ecu: u8, kind: FaultKind, duration: Option<SimTime>) -> Self {
        let ecu = EcuId::new(ecu).expect("fault ecu in 1..=80");
        self.faults.push(FaultSpec { at, ecu, kind, duration });
        self
    }

    pub fn processing_delay_of(&self, ecu: EcuId) -> SimTime {
        self.delay_overrides.get(&ecu).copied().unwrap_or(self.processing_delay)
    }

    /// Highest identifier used by the health protocol.
    pub fn max_health_id(&self) -> u16 {
        RESPONSE_BASE + u16::from(self.fleet_size)
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        let n = self.fleet_size;
        if n == 0 || n > MAX_FLEET {
            return Err(invalid(
                Culprit::Field("fleet_size"),
                format!("fleet_size must be in 1..={MAX_FLEET}, got {n}"),
            ));
        }
        if self.horizon == SimTime::ZERO || self.horizon > MAX_HORIZON {
            return Err(invalid(
                Culprit::Field("horizon_s"),
                format!("horizon must be in (0, {}] s", MAX_HORIZON.as_micros() / 1_000_000),
            ));
        }
        self.monitor.validate(n).map_err(|e| invalid(Culprit::Section("monitor"), e.to_string()))?;
        self.bus.validate().map_err(|e| invalid(Culprit::Section("bus"), e.to_string()))?;
        for ecu in self.delay_overrides.keys() {
            if ecu.get() > n {
                return Err(invalid(
                    Culprit::Section("ecus"),
                    format!("delay override for ecu {ecu} but fleet_size is {n}"),
                ));
            }
        }
        if let Some(bg) = &self.background {
            let sec = Culprit::Section("background");
            if !bg.frames_per_s.is_finite() || bg.frames_per_s < 0.0 {
                return Err(invalid(sec, "frames_per_s must be a finite non-negative number"));
            }
            if bg.dlc > MAX_DLC {
                return Err(invalid(sec, format!("dlc must be in 0..=8, got {}", bg.dlc)));
            }
            if bg.id_min > bg.id_max || bg.id_max > MAX_STD_ID {
                return Err(invalid(
                    sec,
                    format!("id range {:#x}..={:#x} is not a valid 11-bit range", bg.id_min, bg.id_max),
                ));
            }
            if bg.id_min <= self.max_health_id() {
                return Err(invalid(
                    sec,
                    format!("background ids must lie above the health protocol range (> {:#x})", self.max_health_id()),
                ));
            }
            if bg.offered_load(self.bus.bitrate) >= 1.0 {
                return Err(invalid(sec, "offered background load saturates the bus"));
            }
        }
        let t = &self.telematics;
        if !(0.0..=1.0).contains(&t.loss_probability) {
            return Err(invalid(Culprit::Section("telematics"), "loss_probability must be in [0, 1]"));
        }
        if self.status.interval == SimTime::ZERO {
            return Err(invalid(Culprit::Section("telematics"), "status_interval_s must be positive"));
        }
        if !self.status.speed_mps.is_finite() || self.status.speed_mps < 0.0 {
            return Err(invalid(Culprit::Section("telematics"), "speed_mps must be a finite non-negative number"));
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.ecu.get() > n {
                return Err(invalid(
                    Culprit::Fault(i),
                    format!("fault {i}: ecu {} is outside the fleet 1..={n}", f.ecu),
                ));
            }
            if f.at >= self.horizon {
                return Err(invalid(
                    Culprit::Fault(i),
                    format!("fault {i}: at {} is not before the horizon {}", f.at, self.horizon),
                ));
            }
            if f.duration == Some(SimTime::ZERO) {
                return Err(invalid(Culprit::Fault(i), format!("fault {i}: duration must be positive")));
            }
            f.kind.target_state().map_err(|e| invalid(Culprit::Fault(i), format!("fault {i}: {e}")))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// TOML surface

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    fleet_size: Spanned<u8>,
    horizon_s: Spanned<f64>,
    #[serde(default)]
    seed: u64,
    monitor: Option<Spanned<RawMonitor>>,
    bus: Option<Spanned<RawBus>>,
    ecus: Option<Spanned<RawEcus>>,
    background: Option<Spanned<RawBackground>>,
    telematics: Option<Spanned<RawTelematics>>,
    #[serde(default)]
    faults: Vec<Spanned<RawFault>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMonitor {
    period_ms: Option<u64>,
    deadline_ms: Option<u64>,
    retries: Option<u32>,
    retry_spacing_ms: Option<u64>,
    poll_order: Option<Vec<u8>>,
    minor_escalation_threshold: Option<u32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawBus {
    bitrate: Option<Spanned<u32>>,
    gap_bits: Option<u32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawEcus {
    processing_delay_us: Option<u64>,
    #[serde(default)]
    delay_overrides: Vec<RawDelay>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDelay {
    ecu: u8,
    processing_delay_us: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackground {
    frames_per_s: f64,
    id_min: Option<u16>,
    id_max: Option<u16>,
    dlc: Option<u8>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTelematics {
    latency_ms: Option<u64>,
    loss_probability: Option<f64>,
    resend_attempts: Option<u32>,
    status_interval_s: Option<f64>,
    speed_mps: Option<f64>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Minor,
    Major,
    FailSilent,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFault {
    at_s: Spanned<f64>,
    ecu: Spanned<u8>,
    kind: RawKind,
    code: Option<u8>,
    recoverable: Option<bool>,
    duration_s: Option<f64>,
}

/// Whole seconds as a float, converted to microseconds.
pub fn seconds(s: f64) -> Option<SimTime> {
    if !s.is_finite() || s < 0.0 || s > MAX_HORIZON.as_micros() as f64 / 1e6 {
        return None;
    }
    Some(SimTime::from_micros((s * 1e6).round() as u64))
}

fn ms(v: u64) -> Option<SimTime> {
    v.checked_mul(1_000).filter(|us| *us <= MAX_HORIZON.as_micros()).map(SimTime::from_micros)
}

struct Locator<'a> {
    text: &'a str,
    path: Option<String>,
}

impl Locator<'_> {
    fn at(&self, span: Option<Range<usize>>, message: impl Into<String>) -> ScenarioError {
        let (line, column) = match span {
            Some(r) => {
                let before = &self.text[..r.start.min(self.text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
                (line, column)
            }
            None => (0, 0),
        };
        ScenarioError { path: self.path.clone(), line, column, message: message.into() }
    }
}

/// Parse and validate scenario text. `path` only decorates diagnostics.
pub fn parse_scenario(text: &str, path: Option<&str>) -> Result<Scenario, ScenarioError> {
    let loc = Locator { text, path: path.map(str::to_owned) };
    let raw: RawScenario = toml::from_str(text).map_err(|e| loc.at(e.span(), e.message().trim_end().to_owned()))?;

    let n_span = raw.fleet_size.span();
    let n = *raw.fleet_size.get_ref();
    if n == 0 || n > MAX_FLEET {
        return Err(loc.at(Some(n_span), format!("fleet_size must be in 1..={MAX_FLEET}, got {n}")));
    }
    let horizon = seconds(*raw.horizon_s.get_ref())
        .filter(|h| *h > SimTime::ZERO)
        .ok_or_else(|| loc.at(Some(raw.horizon_s.span()), "horizon_s must be a positive number of seconds"))?;

    let mut sc = Scenario::new(n, horizon);
    sc.seed = raw.seed;

    let mut spans: BTreeMap<&'static str, Range<usize>> = BTreeMap::new();
    spans.insert("fleet_size", n_span.clone());
    spans.insert("horizon_s", raw.horizon_s.span());

    if let Some(m) = raw.monitor {
        let span = m.span();
        spans.insert("monitor", span.clone());
        let m = m.into_inner();
        let bad = |what: &str| loc.at(Some(span.clone()), format!("monitor.{what} is out of range"));
        if let Some(v) = m.period_ms {
            sc.monitor.period = ms(v).ok_or_else(|| bad("period_ms"))?;
        }
        if let Some(v) = m.deadline_ms {
            sc.monitor.deadline = ms(v).ok_or_else(|| bad("deadline_ms"))?;
            sc.monitor.retry_spacing = sc.monitor.deadline;
        }
        if let Some(v) = m.retries {
            if v > 1_000 {
                return Err(bad("retries"));
            }
            sc.monitor.retries = v;
        }
        if let Some(v) = m.retry_spacing_ms {
            sc.monitor.retry_spacing = ms(v).ok_or_else(|| bad("retry_spacing_ms"))?;
        }
        if let Some(order) = m.poll_order {
            let ids: Result<Vec<EcuId>, _> = order.into_iter().map(EcuId::new).collect();
            sc.monitor.poll_order = ids.map_err(|e| loc.at(Some(span.clone()), format!("monitor.poll_order: {e}")))?;
        }
        if let Some(v) = m.minor_escalation_threshold {
            sc.monitor.minor_escalation_threshold = v;
        }
    }
    if let Some(b) = raw.bus {
        spans.insert("bus", b.span());
        let b = b.into_inner();
        if let Some(v) = b.bitrate {
            if *v.get_ref() == 0 {
                return Err(loc.at(Some(v.span()), "bus.bitrate must be positive"));
            }
            sc.bus.bitrate = v.into_inner();
        }
        if let Some(v) = b.gap_bits {
            sc.bus.gap_bits = v;
        }
    }
    if let Some(e) = raw.ecus {
        let span = e.span();
        spans.insert("ecus", span.clone());
        let e = e.into_inner();
        let bad = || loc.at(Some(span.clone()), "ecus.processing_delay_us is out of range");
        if let Some(v) = e.processing_delay_us {
            sc.processing_delay =
                Some(v).filter(|v| *v <= MAX_HORIZON.as_micros()).map(SimTime::from_micros).ok_or_else(bad)?;
        }
        for d in e.delay_overrides {
            let ecu =
                EcuId::new(d.ecu).map_err(|err| loc.at(Some(span.clone()), format!("ecus.delay_overrides: {err}")))?;
            let delay = Some(d.processing_delay_us)
                .filter(|v| *v <= MAX_HORIZON.as_micros())
                .map(SimTime::from_micros)
                .ok_or_else(bad)?;
            if sc.delay_overrides.insert(ecu, delay).is_some() {
                return Err(loc.at(Some(span.clone()), format!("ecus.delay_overrides: ecu {ecu} listed twice")));
            }
        }
    }
    if let Some(bg) = raw.background {
        spans.insert("background", bg.span());
        let bg = bg.into_inner();
        sc.background = Some(BackgroundTraffic {
            frames_per_s: bg.frames_per_s,
            id_min: bg.id_min.unwrap_or(0x400),
            id_max: bg.id_max.unwrap_or(MAX_STD_ID),
            dlc: bg.dlc.unwrap_or(8),
        });
    }
    if let Some(t) = raw.telematics {
        let span = t.span();
        spans.insert("telematics", span.clone());
        let t = t.into_inner();
        if let Some(v) = t.latency_ms {
            sc.telematics.latency =
                ms(v).ok_or_else(|| loc.at(Some(span.clone()), "telematics.latency_ms is out of range"))?;
        }
        if let Some(v) = t.loss_probability {
            sc.telematics.loss_probability = v;
        }
        if let Some(v) = t.resend_attempts {
            if v > 100 {
                return Err(loc.at(Some(span.clone()), "telematics.resend_attempts must be at most 100"));
            }
            sc.telematics.resend_attempts = v;
        }
        if let Some(v) = t.status_interval_s {
            sc.status.interval = seconds(v).ok_or_else(|| {
                loc.at(Some(span.clone()), "telematics.status_interval_s must be a positive number of seconds")
            })?;
        }
        if let Some(v) = t.speed_mps {
            sc.status.speed_mps = v;
        }
    }

    let mut fault_spans = Vec::new();
    for (i, f) in raw.faults.into_iter().enumerate() {
        let span = f.span();
        let f = f.into_inner();
        let at = seconds(*f.at_s.get_ref()).ok_or_else(|| {
            loc.at(Some(f.at_s.span()), format!("fault {i}: at_s must be a non-negative number of seconds"))
        })?;
        if at >= horizon {
            return Err(loc
                .at(Some(f.at_s.span()), format!("fault {i}: at_s = {} is not before the horizon", f.at_s.get_ref())));
        }
        let ecu = EcuId::new(*f.ecu.get_ref()).map_err(|e| loc.at(Some(f.ecu.span()), format!("fault {i}: {e}")))?;
        if ecu.get() > n {
            return Err(loc.at(Some(f.ecu.span()), format!("fault {i}: ecu {ecu} is outside the fleet 1..={n}")));
        }
        let duration = match f.duration_s {
            None => None,
            Some(d) => Some(
                seconds(d)
                    .filter(|d| *d > SimTime::ZERO)
                    .ok_or_else(|| loc.at(Some(span.clone()), format!("fault {i}: duration_s must be positive")))?,
            ),
        };
        let kind = match (f.kind, f.code, f.recoverable) {
            (RawKind::Minor, Some(code), rec) => FaultKind::Minor { code, recoverable: rec.unwrap_or(true) },
            (RawKind::Major, Some(code), None) => FaultKind::Major { code },
            (RawKind::FailSilent, None, None) => FaultKind::FailSilent,
            (RawKind::Minor | RawKind::Major, None, _) => {
                return Err(loc.at(Some(span), format!("fault {i}: minor and major faults need a `code`")));
            }
            (RawKind::Major, _, Some(_)) => {
                return Err(
                    loc.at(Some(span), format!("fault {i}: major faults are never recoverable; drop `recoverable`"))
                );
            }
            (RawKind::FailSilent, _, _) => {
                return Err(
                    loc.at(Some(span), format!("fault {i}: fail_silent faults take no `code` or `recoverable`"))
                );
            }
        };
        sc.faults.push(FaultSpec { at, ecu, kind, duration });
        fault_spans.push(span);
    }

    sc.validate().map_err(|e| {
        let span = match e.culprit {
            Culprit::Field(f) | Culprit::Section(f) => spans.get(f).cloned(),
            Culprit::Fault(i) => fault_spans.get(i).cloned(),
        }
        .or_else(|| Some(n_span.clone()));
        loc.at(span, e.message)
    })?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| ScenarioError {
        path: Some(shown.clone()),
        line: 0,
        column: 0,
        message: format!("cannot read scenario: {e}"),
    })?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let good = &e.as_bytes()[..e.utf8_error().valid_up_to()];
        let line = good.iter().filter(|b| **b == b'\n').count() + 1;
        ScenarioError { path: Some(shown.clone()), line, column: 1, message: "scenario is not valid UTF-8".into() }
    })?;
    parse_scenario(&text, Some(&shown))
}
