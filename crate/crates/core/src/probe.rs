//! Periodic service tests: scheduling, the append-only result log, and the
//! current-status view derived from it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{NodeId, NodeKind, Registry, RegistryNode, ServiceType, TopologySnapshot};
use crate::time::Timestamp;

pub const DEFAULT_PERIOD_MIN: u32 = 30;
pub const MPI_PERIOD_DAYS: u32 = 7;
pub const MPI_PROBE_ID: &str = "mpi-setup";
pub const DETAIL_LIMIT: usize = 4096;
pub const CLOCK_SKEW_SECS: i64 = 5 * 60;
pub const DEFAULT_PARALLELISM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeStatus {
    Ok,
    Warn,
    Error,
    Timeout,
}

impl ProbeStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, ProbeStatus::Error | ProbeStatus::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceState {
    Up,
    Degraded,
    Down,
    Unknown,
}

impl ServiceState {
    /// UP and DEGRADED count as available; UNKNOWN does not.
    pub fn is_available(self) -> bool {
        matches!(self, ServiceState::Up | ServiceState::Degraded)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceState::Up => "UP",
            ServiceState::Degraded => "DEGRADED",
            ServiceState::Down => "DOWN",
            ServiceState::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for ServiceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<ProbeStatus> for ServiceState {
    fn from(s: ProbeStatus) -> Self {
        match s {
            ProbeStatus::Ok => ServiceState::Up,
            ProbeStatus::Warn => ServiceState::Degraded,
            ProbeStatus::Error | ProbeStatus::Timeout => ServiceState::Down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProbeDefinition")]
pub struct ProbeDefinition {
    pub probe_id: String,
    pub service_type: ServiceType,
    pub period_s: u32,
    pub timeout_s: u32,
    #[serde(default)]
    pub critical: bool,
}

#[derive(Deserialize)]
struct RawProbeDefinition {
    probe_id: String,
    service_type: ServiceType,
    period_s: u32,
    timeout_s: u32,
    #[serde(default)]
    critical: bool,
}

impl TryFrom<RawProbeDefinition> for ProbeDefinition {
    type Error = Error;

    fn try_from(r: RawProbeDefinition) -> Result<Self> {
        ProbeDefinition::new(r.probe_id, r.service_type, r.period_s, r.timeout_s, r.critical)
    }
}

impl ProbeDefinition {
    pub fn new(probe_id: impl Into<String>, service_type: ServiceType, period_s: u32, timeout_s: u32, critical: bool) -> Result<Self> {
        let probe_id = probe_id.into();
        if probe_id.is_empty() {
            return Err(Error::InvalidProbe("empty probe id".to_string()));
        }
        if period_s == 0 {
            return Err(Error::InvalidProbe("period must be positive".to_string()));
        }
        if timeout_s >= period_s {
            return Err(Error::InvalidProbe("timeout must be shorter than the period".to_string()));
        }
        Ok(ProbeDefinition { probe_id, service_type, period_s, timeout_s, critical })
    }

    pub fn period(&self) -> TimeDelta {
        TimeDelta::seconds(i64::from(self.period_s))
    }

    /// Age at which a result stops vouching for the service.
    pub fn staleness(&self) -> TimeDelta {
        TimeDelta::seconds(2 * i64::from(self.period_s))
    }
}

/// Probe configuration: one primary probe per service type plus the weekly MPI check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCatalogue {
    pub probes: Vec<ProbeDefinition>,
    pub mpi: ProbeDefinition,
}

impl ProbeCatalogue {
    pub fn with_period(period_min: u32) -> Result<Self> {
        let period_s = period_min.max(1) * 60;
        let timeout_s = (period_s / 3).max(1).min(period_s - 1);
        let probes = ServiceType::ALL
            .into_iter()
            .map(|t| {
                let id = match t {
                    ServiceType::Ce => "ce-job-submit",
                    ServiceType::Se => "se-put-get",
                    ServiceType::SBdii => "sbdii-query",
                    ServiceType::Wms => "wms-job-list-match",
                    ServiceType::Voms => "voms-proxy-init",
                    ServiceType::Lfc => "lfc-ls",
                    ServiceType::Fts => "fts-channel-list",
                    ServiceType::MyProxy => "myproxy-store",
                    ServiceType::Other => "tcp-connect",
                };
                let critical = matches!(t, ServiceType::Ce | ServiceType::Se | ServiceType::SBdii);
                ProbeDefinition::new(id, t, period_s, timeout_s, critical)
            })
            .collect::<Result<Vec<_>>>()?;
        let mpi_period = MPI_PERIOD_DAYS * 24 * 3600;
        let mpi = ProbeDefinition::new(MPI_PROBE_ID, ServiceType::Ce, mpi_period, 3600, false)?;
        Ok(ProbeCatalogue { probes, mpi })
    }

    pub fn primary_for(&self, service_type: ServiceType) -> Option<&ProbeDefinition> {
        self.probes.iter().find(|p| p.service_type == service_type)
    }

    pub fn by_id(&self, probe_id: &str) -> Option<&ProbeDefinition> {
        if probe_id == self.mpi.probe_id {
            return Some(&self.mpi);
        }
        self.probes.iter().find(|p| p.probe_id == probe_id)
    }

    /// Primary probe for a SERVICE node.
    pub fn probe_for(&self, service: &RegistryNode) -> Option<&ProbeDefinition> {
        self.primary_for(service.service_type()?)
    }
}

impl Default for ProbeCatalogue {
    fn default() -> Self {
        ProbeCatalogue::with_period(DEFAULT_PERIOD_MIN).expect("default catalogue is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub service: NodeId,
    #[serde(rename = "probe")]
    pub probe_id: String,
    #[serde(rename = "ts")]
    pub timestamp: Timestamp,
    pub status: ProbeStatus,
    #[serde(default)]
    pub detail: String,
}

impl ProbeResult {
    pub fn new(service: NodeId, probe_id: impl Into<String>, timestamp: Timestamp, status: ProbeStatus) -> Self {
        ProbeResult { service, probe_id: probe_id.into(), timestamp, status, detail: String::new() }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn key(&self) -> (NodeId, String, Timestamp) {
        (self.service.clone(), self.probe_id.clone(), self.timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResultId(pub u64);

impl fmt::Display for ResultId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub service: NodeId,
    pub state: ServiceState,
    pub as_of: Timestamp,
    pub source_result: Option<ResultId>,
}

/// Current status plus the length of the trailing run of failed results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceHealth {
    pub status: ServiceStatus,
    pub consecutive_failures: u32,
}

/// Last execution time per `(service, probe_id)`.
pub type LastRun = BTreeMap<(NodeId, String), Timestamp>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DueProbe {
    pub service: NodeId,
    pub probe: ProbeDefinition,
    pub last_run: Option<Timestamp>,
}

/// Probes that have never run or whose last run is at least one period old.
///
/// Only ACTIVE services under ACTIVE sites are considered. Sites advertising
/// `mpi=true` additionally get the weekly MPI check scheduled against each of
/// their CEs. The result is ordered by `(last_run, service, probe_id)` with
/// never-run probes first.
pub fn due_probes(now: Timestamp, topology: &TopologySnapshot, last_run: &LastRun, catalogue: &ProbeCatalogue) -> Vec<DueProbe> {
    let index = topology.index();
    let mut due = Vec::new();
    for node in &topology.nodes {
        if node.kind != NodeKind::Service || !node.is_active() {
            continue;
        }
        let Some(site) = node.parent.as_ref().and_then(|p| index.get(p)) else {
            continue;
        };
        if !site.is_active() {
            continue;
        }
        let mut candidates: Vec<&ProbeDefinition> = catalogue.probe_for(node).into_iter().collect();
        if site.supports_mpi() && node.service_type() == Some(ServiceType::Ce) {
            candidates.push(&catalogue.mpi);
        }
        for probe in candidates {
            let last = last_run.get(&(node.id.clone(), probe.probe_id.clone())).copied();
            let is_due = match last {
                None => true,
                Some(t) => now - t >= probe.period(),
            };
            if is_due {
                due.push(DueProbe { service: node.id.clone(), probe: probe.clone(), last_run: last });
            }
        }
    }
    due.sort_by(|a, b| a.last_run.cmp(&b.last_run).then_with(|| a.service.cmp(&b.service)).then_with(|| a.probe.probe_id.cmp(&b.probe.probe_id)));
    due
}

/// Append-only log of probe results, unique on `(service, probe_id, timestamp)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<ProbeResult>", into = "Vec<ProbeResult>")]
pub struct ResultStore {
    results: Vec<ProbeResult>,
    index: BTreeMap<(NodeId, String, Timestamp), ResultId>,
    /// Per `(service, probe)`, positions into `results` ordered by timestamp.
    series: BTreeMap<(NodeId, String), Vec<usize>>,
}

impl From<Vec<ProbeResult>> for ResultStore {
    fn from(results: Vec<ProbeResult>) -> Self {
        let mut store = ResultStore::default();
        for r in results {
            store.append(r);
        }
        store
    }
}

impl From<ResultStore> for Vec<ProbeResult> {
    fn from(store: ResultStore) -> Self {
        store.results
    }
}

impl ResultStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn get(&self, id: ResultId) -> Option<&ProbeResult> {
        self.results.get(id.0 as usize)
    }

    /// Every stored result in arrival order.
    pub fn iter(&self) -> impl Iterator<Item = (ResultId, &ProbeResult)> {
        self.results.iter().enumerate().map(|(i, r)| (ResultId(i as u64), r))
    }

    /// Appends without validation; duplicates resolve to the existing id.
    pub fn append(&mut self, result: ProbeResult) -> ResultId {
        let key = result.key();
        if let Some(id) = self.index.get(&key) {
            return *id;
        }
        let pos = self.results.len();
        let id = ResultId(pos as u64);
        let series = self.series.entry((result.service.clone(), result.probe_id.clone())).or_default();
        let at = series.partition_point(|&i| self.results[i].timestamp <= result.timestamp);
        series.insert(at, pos);
        self.index.insert(key, id);
        self.results.push(result);
        id
    }

    /// Validates and stores a result, returning the existing id on replay.
    pub fn record_result(&mut self, result: ProbeResult, registry: &Registry, now: Timestamp) -> Result<ResultId> {
        match registry.get(&result.service) {
            Some(n) if n.kind == NodeKind::Service => {}
            _ => return Err(Error::UnknownService(result.service)),
        }
        if result.timestamp > now + TimeDelta::seconds(CLOCK_SKEW_SECS) {
            return Err(Error::FutureTimestamp);
        }
        if result.detail.len() > DETAIL_LIMIT {
            return Err(Error::PayloadTooLarge { limit: DETAIL_LIMIT });
        }
        Ok(self.append(result))
    }

    pub fn contains(&self, result: &ProbeResult) -> bool {
        self.index.contains_key(&result.key())
    }

    /// Results of one probe on one service, ascending by timestamp.
    pub fn series(&self, service: &NodeId, probe_id: &str) -> impl Iterator<Item = (ResultId, &ProbeResult)> {
        self.series.get(&(service.clone(), probe_id.to_string())).into_iter().flatten().map(|&i| (ResultId(i as u64), &self.results[i]))
    }

    /// Owned, sorted copy of [`ResultStore::series`].
    pub fn series_vec(&self, service: &NodeId, probe_id: &str) -> Vec<ProbeResult> {
        self.series(service, probe_id).map(|(_, r)| r.clone()).collect()
    }

    pub fn last_run(&self) -> LastRun {
        self.series.iter().filter_map(|(k, v)| v.last().map(|&i| (k.clone(), self.results[i].timestamp))).collect()
    }

    fn at_or_before(&self, service: &NodeId, probe_id: &str, now: Timestamp) -> Vec<(ResultId, &ProbeResult)> {
        self.series(service, probe_id).take_while(|(_, r)| r.timestamp <= now).collect()
    }

    /// Status implied by the newest result of `probe` at or before `now`.
    ///
    /// A result at least two periods old no longer vouches for the service and
    /// yields UNKNOWN, as does the absence of any result.
    pub fn latest_status(&self, registry: &Registry, service: &NodeId, probe: &ProbeDefinition, now: Timestamp) -> Result<ServiceStatus> {
        match registry.get(service) {
            Some(n) if n.kind == NodeKind::Service => {}
            _ => return Err(Error::UnknownService(service.clone())),
        }
        let latest = self.at_or_before(service, &probe.probe_id, now).last().map(|(id, r)| (*id, (*r).clone()));
        let (state, source) = match latest {
            Some((id, r)) if now - r.timestamp < probe.staleness() => (ServiceState::from(r.status), Some(id)),
            Some((id, _)) => (ServiceState::Unknown, Some(id)),
            None => (ServiceState::Unknown, None),
        };
        Ok(ServiceStatus { service: service.clone(), state, as_of: now, source_result: source })
    }

    pub fn health(&self, registry: &Registry, service: &NodeId, probe: &ProbeDefinition, now: Timestamp) -> Result<ServiceHealth> {
        let status = self.latest_status(registry, service, probe, now)?;
        let consecutive_failures =
            self.at_or_before(service, &probe.probe_id, now).iter().rev().take_while(|(_, r)| r.status.is_failure()).count() as u32;
        Ok(ServiceHealth { status, consecutive_failures })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpiCheckReport {
    pub site: NodeId,
    pub timestamp: Timestamp,
    pub worker_nodes: Vec<String>,
    pub concurrent: bool,
    pub passed: bool,
}

impl MpiCheckReport {
    fn distinct_workers(&self) -> usize {
        let mut wns: Vec<&String> = self.worker_nodes.iter().collect();
        wns.sort();
        wns.dedup();
        wns.len()
    }

    /// A pass only counts when the job really ran concurrently on two or more worker nodes.
    pub fn effective_pass(&self) -> bool {
        self.passed && self.concurrent && self.distinct_workers() >= 2
    }
}

/// Turns a weekly MPI check report into a `mpi-setup` result against the site's CE.
pub fn record_mpi_check(report: &MpiCheckReport, registry: &Registry) -> Result<ProbeResult> {
    let site = match registry.get(&report.site) {
        Some(n) if n.kind == NodeKind::Site => n,
        _ => return Err(Error::UnknownSite(report.site.clone())),
    };
    if !site.supports_mpi() {
        return Err(Error::MpiNotSupported(site.id.clone()));
    }
    let ce = registry
        .services_of(&site.id)
        .filter(|s| s.service_type() == Some(ServiceType::Ce) && s.is_active())
        .map(|s| s.id.clone())
        .min()
        .ok_or_else(|| Error::UnknownService(site.id.clone()))?;
    let status = if report.effective_pass() { ProbeStatus::Ok } else { ProbeStatus::Error };
    let detail = format!("worker_nodes={} concurrent={} reported_pass={}", report.worker_nodes.join(","), report.concurrent, report.passed);
    Ok(ProbeResult::new(ce, MPI_PROBE_ID, report.timestamp, status).with_detail(detail))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub status: ProbeStatus,
    pub detail: String,
}

/// Runs one probe against one service.
pub trait ProbeExecutor: Send + Sync {
    fn execute(&self, service: &RegistryNode, probe: &ProbeDefinition, at: Timestamp) -> ProbeOutcome;
}

/// Replays scripted outcomes: the newest scripted entry at or before the
/// execution time wins, and unscripted probes report the default status.
#[derive(Debug, Clone)]
pub struct SimulatedExecutor {
    script: BTreeMap<(NodeId, String), BTreeMap<Timestamp, ProbeOutcome>>,
    default: ProbeStatus,
}

impl SimulatedExecutor {
    pub fn new(default: ProbeStatus) -> Self {
        SimulatedExecutor { script: BTreeMap::new(), default }
    }

    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a ProbeResult>, default: ProbeStatus) -> Self {
        let mut exec = Self::new(default);
        for r in results {
            exec.script
                .entry((r.service.clone(), r.probe_id.clone()))
                .or_default()
                .insert(r.timestamp, ProbeOutcome { status: r.status, detail: r.detail.clone() });
        }
        exec
    }
}

impl ProbeExecutor for SimulatedExecutor {
    fn execute(&self, service: &RegistryNode, probe: &ProbeDefinition, at: Timestamp) -> ProbeOutcome {
        self.script
            .get(&(service.id.clone(), probe.probe_id.clone()))
            .and_then(|s| s.range(..=at).next_back())
            .map(|(_, o)| o.clone())
            .unwrap_or_else(|| ProbeOutcome { status: self.default, detail: "simulated".to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Actor, StorageTb};
    use alloc::vec;
    use chrono::DateTime;

    fn t(min: i64) -> Timestamp {
        DateTime::from_timestamp(1_241_136_000 + min * 60, 0).unwrap()
    }

    fn reg() -> Registry {
        let mut r = Registry::new();
        let op = Actor::Operator;
        r.upsert_node(&op, RegistryNode::roc("see", "SEE"), t(0)).unwrap();
        r.upsert_node(&op, RegistryNode::country("rs", "Serbia", &"see".into()), t(0)).unwrap();
        r.upsert_node(&op, RegistryNode::site("rs-1", "AEGIS01", &"rs".into(), 700, StorageTb::from_milli(1000)).with_attr("mpi", "true"), t(0))
            .unwrap();
        r.upsert_node(&op, RegistryNode::site("rs-2", "AEGIS02", &"rs".into(), 70, StorageTb::ZERO), t(0)).unwrap();
        r.upsert_node(&op, RegistryNode::service("ce1", "ce", &"rs-1".into(), ServiceType::Ce, "ce.a.rs:2119", true), t(0)).unwrap();
        r.upsert_node(&op, RegistryNode::service("se1", "se", &"rs-1".into(), ServiceType::Se, "se.a.rs:8443", true), t(0)).unwrap();
        r.upsert_node(&op, RegistryNode::service("ce2", "ce", &"rs-2".into(), ServiceType::Ce, "ce.b.rs:2119", true), t(0)).unwrap();
        r
    }

    fn ce_probe() -> ProbeDefinition {
        ProbeCatalogue::default().primary_for(ServiceType::Ce).unwrap().clone()
    }

    #[test]
    fn definition_invariants() {
        assert!(ProbeDefinition::new("p", ServiceType::Ce, 0, 0, true).is_err());
        assert!(ProbeDefinition::new("p", ServiceType::Ce, 60, 60, true).is_err());
        assert!(ProbeDefinition::new("p", ServiceType::Ce, 60, 59, true).is_ok());
        let json_like = RawProbeDefinition { probe_id: "p".into(), service_type: ServiceType::Se, period_s: 10, timeout_s: 20, critical: false };
        assert!(ProbeDefinition::try_from(json_like).is_err());
    }

    #[test]
    fn due_probe_selection_and_order() {
        let r = reg();
        let topo = r.export_topology(&"see".into()).unwrap();
        let cat = ProbeCatalogue::default();
        let ce = ce_probe().probe_id;
        let se = cat.primary_for(ServiceType::Se).unwrap().probe_id.clone();
        let mut last = LastRun::new();
        let now = t(1000);
        last.insert(("ce1".into(), ce.clone()), now - TimeDelta::minutes(31));
        last.insert(("se1".into(), se.clone()), now - TimeDelta::minutes(10));
        last.insert(("ce2".into(), ce.clone()), now - TimeDelta::minutes(45));
        last.insert(("ce1".into(), MPI_PROBE_ID.into()), now - TimeDelta::days(2));
        let due = due_probes(now, &topo, &last, &cat);
        let got: Vec<(&str, &str)> = due.iter().map(|d| (d.service.as_str(), d.probe.probe_id.as_str())).collect();
        // ce2 is stalest, then ce1; se1 ran 10 min ago; the MPI check is within its week.
        assert_eq!(got, vec![("ce2", ce.as_str()), ("ce1", ce.as_str())]);

        last.insert(("ce1".into(), MPI_PROBE_ID.into()), now - TimeDelta::days(8));
        let due = due_probes(now, &topo, &last, &cat);
        assert_eq!(due[0].probe.probe_id, MPI_PROBE_ID);

        // Never-run probes come first.
        let due = due_probes(now, &topo, &LastRun::new(), &cat);
        assert_eq!(due.len(), 4);
        assert!(due.iter().all(|d| d.last_run.is_none()));
    }

    #[test]
    fn record_is_idempotent_and_validated() {
        let r = reg();
        let mut store = ResultStore::new();
        let ok = ProbeResult::new("ce1".into(), "ce-job-submit", t(0), ProbeStatus::Ok);
        let id = store.record_result(ok.clone(), &r, t(1)).unwrap();
        assert_eq!(store.record_result(ok, &r, t(1)).unwrap(), id);
        assert_eq!(store.len(), 1);

        let ghost = ProbeResult::new("gone".into(), "x", t(0), ProbeStatus::Ok);
        assert_eq!(store.record_result(ghost, &r, t(1)), Err(Error::UnknownService("gone".into())));
        let site = ProbeResult::new("rs-1".into(), "x", t(0), ProbeStatus::Ok);
        assert!(matches!(store.record_result(site, &r, t(1)), Err(Error::UnknownService(_))));
        let future = ProbeResult::new("ce1".into(), "x", t(10), ProbeStatus::Ok);
        assert_eq!(store.record_result(future, &r, t(4)), Err(Error::FutureTimestamp));
        let skewed = ProbeResult::new("ce1".into(), "x", t(9), ProbeStatus::Ok);
        assert!(store.record_result(skewed, &r, t(4)).is_ok());
        let big = ProbeResult::new("ce1".into(), "x", t(0), ProbeStatus::Ok).with_detail("x".repeat(DETAIL_LIMIT + 1));
        assert_eq!(store.record_result(big, &r, t(1)), Err(Error::PayloadTooLarge { limit: DETAIL_LIMIT }));
        let max = ProbeResult::new("ce1".into(), "y", t(0), ProbeStatus::Ok).with_detail("x".repeat(DETAIL_LIMIT));
        assert!(store.record_result(max, &r, t(1)).is_ok());
    }

    #[test]
    fn latest_status_rules() {
        let r = reg();
        let p = ce_probe();
        let mut store = ResultStore::new();
        store.append(ProbeResult::new("ce1".into(), &p.probe_id, t(0), ProbeStatus::Ok));
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(5)).unwrap().state, ServiceState::Up);
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(61)).unwrap().state, ServiceState::Unknown);
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(59)).unwrap().state, ServiceState::Up);
        store.append(ProbeResult::new("ce1".into(), &p.probe_id, t(100), ProbeStatus::Error));
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(105)).unwrap().state, ServiceState::Down);
        store.append(ProbeResult::new("ce1".into(), &p.probe_id, t(130), ProbeStatus::Warn));
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(131)).unwrap().state, ServiceState::Degraded);
        // Results after `now` are invisible.
        assert_eq!(store.latest_status(&r, &"ce1".into(), &p, t(120)).unwrap().state, ServiceState::Down);
        let none = store.latest_status(&r, &"ce2".into(), &p, t(0)).unwrap();
        assert_eq!((none.state, none.source_result), (ServiceState::Unknown, None));
        assert!(matches!(store.latest_status(&r, &"nope".into(), &p, t(0)), Err(Error::UnknownService(_))));
    }

    #[test]
    fn out_of_order_appends_keep_series_sorted() {
        let mut store = ResultStore::new();
        for m in [30, 0, 60, 15] {
            store.append(ProbeResult::new("ce1".into(), "p", t(m), ProbeStatus::Ok));
        }
        let ts: Vec<_> = store.series(&"ce1".into(), "p").map(|(_, r)| r.timestamp).collect();
        assert_eq!(ts, vec![t(0), t(15), t(30), t(60)]);
        assert_eq!(store.last_run()[&("ce1".into(), "p".into())], t(60));
    }

    #[test]
    fn consecutive_failures_counted() {
        let r = reg();
        let p = ce_probe();
        let mut store = ResultStore::new();
        for (m, s) in [(0, ProbeStatus::Ok), (30, ProbeStatus::Error), (60, ProbeStatus::Timeout)] {
            store.append(ProbeResult::new("ce1".into(), &p.probe_id, t(m), s));
        }
        let h = store.health(&r, &"ce1".into(), &p, t(61)).unwrap();
        assert_eq!((h.status.state, h.consecutive_failures), (ServiceState::Down, 2));
        let h = store.health(&r, &"ce1".into(), &p, t(31)).unwrap();
        assert_eq!(h.consecutive_failures, 1);
    }

    #[test]
    fn mpi_check_results() {
        let r = reg();
        let report =
            MpiCheckReport { site: "rs-1".into(), timestamp: t(0), worker_nodes: vec!["wn01".into(), "wn02".into()], concurrent: true, passed: true };
        let res = record_mpi_check(&report, &r).unwrap();
        assert_eq!((res.service.as_str(), res.probe_id.as_str(), res.status), ("ce1", MPI_PROBE_ID, ProbeStatus::Ok));

        let single = MpiCheckReport { worker_nodes: vec!["wn01".into()], ..report.clone() };
        assert_eq!(record_mpi_check(&single, &r).unwrap().status, ProbeStatus::Error);
        let same_wn = MpiCheckReport { worker_nodes: vec!["wn01".into(), "wn01".into()], ..report.clone() };
        assert_eq!(record_mpi_check(&same_wn, &r).unwrap().status, ProbeStatus::Error);
        let serial = MpiCheckReport { concurrent: false, ..report.clone() };
        assert_eq!(record_mpi_check(&serial, &r).unwrap().status, ProbeStatus::Error);

        let no_mpi = MpiCheckReport { site: "rs-2".into(), ..report.clone() };
        assert_eq!(record_mpi_check(&no_mpi, &r), Err(Error::MpiNotSupported("rs-2".into())));
        let missing = MpiCheckReport { site: "ce1".into(), ..report };
        assert_eq!(record_mpi_check(&missing, &r), Err(Error::UnknownSite("ce1".into())));
    }

    #[test]
    fn simulated_executor_replays_script() {
        let r = reg();
        let p = ce_probe();
        let script = [
            ProbeResult::new("ce1".into(), &p.probe_id, t(0), ProbeStatus::Ok),
            ProbeResult::new("ce1".into(), &p.probe_id, t(30), ProbeStatus::Error),
        ];
        let exec = SimulatedExecutor::from_results(script.iter(), ProbeStatus::Warn);
        let ce1 = r.get(&"ce1".into()).unwrap();
        assert_eq!(exec.execute(ce1, &p, t(10)).status, ProbeStatus::Ok);
        assert_eq!(exec.execute(ce1, &p, t(45)).status, ProbeStatus::Error);
        let ce2 = r.get(&"ce2".into()).unwrap();
        assert_eq!(exec.execute(ce2, &p, t(45)).status, ProbeStatus::Warn);
    }
}
