//! WMS metric snapshots, their history and threshold alarms with hysteresis.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{NodeId, NodeKind, Registry, ServiceType};
use crate::time::{Timestamp, Window};

pub const INPUT_QUEUE_LENGTH: &str = "input_queue_length";
pub const JOBS_WAITING: &str = "jobs_waiting";
pub const LOAD_1MIN: &str = "load_1min";
pub const DISK_USED_PCT: &str = "disk_used_pct";
pub const DAEMONS_DOWN_COUNT: &str = "daemons_down_count";

pub const METRICS: [&str; 5] = [INPUT_QUEUE_LENGTH, JOBS_WAITING, LOAD_1MIN, DISK_USED_PCT, DAEMONS_DOWN_COUNT];

pub fn is_metric(name: &str) -> bool {
    METRICS.contains(&name)
}

fn check_metric(name: &str) -> Result<()> {
    if is_metric(name) {
        Ok(())
    } else {
        Err(Error::UnknownMetric(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmsSnapshot {
    pub wms: NodeId,
    #[serde(rename = "ts")]
    pub timestamp: Timestamp,
    pub metrics: BTreeMap<String, f64>,
    pub agent_version: String,
}

impl WmsSnapshot {
    pub fn validate(&self) -> Result<()> {
        for name in self.metrics.keys() {
            check_metric(name)?;
        }
        for name in METRICS {
            let v = *self.metrics.get(name).ok_or_else(|| Error::MissingMetric(name.to_string()))?;
            let in_range = v.is_finite() && v >= 0.0 && (name != DISK_USED_PCT || v <= 100.0);
            if !in_range {
                return Err(Error::OutOfRange { metric: name.to_string(), value: format!("{v}") });
            }
        }
        Ok(())
    }

    pub fn value(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }
}

/// Agent side: packages local readings into a validated snapshot.
pub fn agent_snapshot(readings: &BTreeMap<String, f64>, wms: &NodeId, now: Timestamp, agent_version: &str) -> Result<WmsSnapshot> {
    let snap = WmsSnapshot { wms: wms.clone(), timestamp: now, metrics: readings.clone(), agent_version: agent_version.to_string() };
    snap.validate()?;
    Ok(snap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRule {
    pub metric: String,
    pub raise_above: f64,
    pub clear_below: f64,
    pub guide_url: String,
}

impl AlarmRule {
    pub fn validate(&self) -> Result<()> {
        check_metric(&self.metric)?;
        if !self.raise_above.is_finite() || !self.clear_below.is_finite() {
            return Err(Error::InvalidRule(format!("{}: thresholds must be finite", self.metric)));
        }
        if self.clear_below > self.raise_above {
            return Err(Error::InvalidRule(format!("{}: clear_below exceeds raise_above", self.metric)));
        }
        Ok(())
    }
}

/// Validated rule set with at most one rule per metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AlarmRule>", into = "Vec<AlarmRule>")]
pub struct AlarmRules(BTreeMap<String, AlarmRule>);

impl AlarmRules {
    pub fn new(rules: Vec<AlarmRule>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for rule in rules {
            rule.validate()?;
            let metric = rule.metric.clone();
            if map.insert(metric.clone(), rule).is_some() {
                return Err(Error::InvalidRule(format!("{metric}: more than one rule")));
            }
        }
        Ok(AlarmRules(map))
    }

    pub fn get(&self, metric: &str) -> Option<&AlarmRule> {
        self.0.get(metric)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AlarmRule> {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<AlarmRule>> for AlarmRules {
    type Error = Error;

    fn try_from(rules: Vec<AlarmRule>) -> Result<Self> {
        AlarmRules::new(rules)
    }
}

impl From<AlarmRules> for Vec<AlarmRule> {
    fn from(rules: AlarmRules) -> Self {
        rules.0.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AlarmState {
    Raised,
    Cleared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub wms: NodeId,
    pub metric: String,
    pub state: AlarmState,
    pub raised_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleared_at: Option<Timestamp>,
    pub peak_value: f64,
    pub guide_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmTransition {
    pub wms: NodeId,
    pub metric: String,
    pub state: AlarmState,
    pub at: Timestamp,
    pub value: f64,
    pub guide_url: String,
}

/// Collector: snapshot history per WMS plus the alarm book.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "CollectorState", into = "CollectorState")]
pub struct Collector {
    history: BTreeMap<NodeId, BTreeMap<Timestamp, WmsSnapshot>>,
    alarms: Vec<Alarm>,
    active: BTreeMap<(NodeId, String), usize>,
    transitions: Vec<AlarmTransition>,
}

#[derive(Serialize, Deserialize)]
struct CollectorState {
    snapshots: Vec<WmsSnapshot>,
    alarms: Vec<Alarm>,
    transitions: Vec<AlarmTransition>,
}

impl From<CollectorState> for Collector {
    fn from(s: CollectorState) -> Self {
        let mut c = Collector { alarms: s.alarms, transitions: s.transitions, ..Collector::default() };
        for snap in s.snapshots {
            c.history.entry(snap.wms.clone()).or_default().insert(snap.timestamp, snap);
        }
        for (i, a) in c.alarms.iter().enumerate() {
            if a.state == AlarmState::Raised {
                c.active.insert((a.wms.clone(), a.metric.clone()), i);
            }
        }
        c
    }
}

impl From<Collector> for CollectorState {
    fn from(c: Collector) -> Self {
        CollectorState { snapshots: c.history.into_values().flat_map(BTreeMap::into_values).collect(), alarms: c.alarms, transitions: c.transitions }
    }
}

fn check_wms(registry: &Registry, wms: &NodeId) -> Result<()> {
    match registry.get(wms) {
        Some(n) if n.kind == NodeKind::Service && n.service_type() == Some(ServiceType::Wms) => Ok(()),
        _ => Err(Error::UnknownWms(wms.clone())),
    }
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the snapshot and applies `rules`, returning the alarm transitions
    /// it caused. Snapshots are evaluated in arrival order.
    pub fn ingest_snapshot(&mut self, snapshot: WmsSnapshot, rules: &AlarmRules, registry: &Registry) -> Result<Vec<AlarmTransition>> {
        check_wms(registry, &snapshot.wms)?;
        snapshot.validate()?;
        let series = self.history.entry(snapshot.wms.clone()).or_default();
        if series.contains_key(&snapshot.timestamp) {
            return Err(Error::DuplicateTimestamp(snapshot.wms.clone()));
        }
        let mut out = Vec::new();
        for rule in rules.iter() {
            let value = snapshot.metrics[&rule.metric];
            let key = (snapshot.wms.clone(), rule.metric.clone());
            match self.active.get(&key).copied() {
                None if value > rule.raise_above => {
                    self.alarms.push(Alarm {
                        wms: snapshot.wms.clone(),
                        metric: rule.metric.clone(),
                        state: AlarmState::Raised,
                        raised_at: snapshot.timestamp,
                        cleared_at: None,
                        peak_value: value,
                        guide_url: rule.guide_url.clone(),
                    });
                    self.active.insert(key, self.alarms.len() - 1);
                    out.push(transition(&snapshot, rule, AlarmState::Raised, value));
                }
                Some(i) if value < rule.clear_below => {
                    let alarm = &mut self.alarms[i];
                    alarm.state = AlarmState::Cleared;
                    alarm.cleared_at = Some(snapshot.timestamp);
                    self.active.remove(&key);
                    out.push(transition(&snapshot, rule, AlarmState::Cleared, value));
                }
                Some(i) => {
                    let alarm = &mut self.alarms[i];
                    alarm.peak_value = alarm.peak_value.max(value);
                }
                None => {}
            }
        }
        series.insert(snapshot.timestamp, snapshot);
        self.transitions.extend(out.iter().cloned());
        Ok(out)
    }

    /// Points of `metric` for `wms` inside `window`, ascending by time.
    pub fn wms_history(&self, wms: &NodeId, metric: &str, window: Window, registry: &Registry) -> Result<Vec<(Timestamp, f64)>> {
        check_wms(registry, wms)?;
        check_metric(metric)?;
        let Some(series) = self.history.get(wms) else {
            return Ok(Vec::new());
        };
        Ok(series.range(window.start()..window.end()).filter_map(|(ts, snap)| snap.value(metric).map(|v| (*ts, v))).collect())
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &WmsSnapshot> {
        self.history.values().flat_map(BTreeMap::values)
    }

    pub fn latest(&self, wms: &NodeId) -> Option<&WmsSnapshot> {
        self.history.get(wms).and_then(|s| s.values().next_back())
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn active_alarms(&self) -> impl Iterator<Item = &Alarm> {
        self.active.values().map(|&i| &self.alarms[i])
    }

    pub fn transitions(&self) -> &[AlarmTransition] {
        &self.transitions
    }
}

fn transition(snapshot: &WmsSnapshot, rule: &AlarmRule, state: AlarmState, value: f64) -> AlarmTransition {
    AlarmTransition {
        wms: snapshot.wms.clone(),
        metric: rule.metric.clone(),
        state,
        at: snapshot.timestamp,
        value,
        guide_url: rule.guide_url.clone(),
    }
}
