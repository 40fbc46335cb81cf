//! Persistent application state shared by the HTTP service and the CLI.

use std::path::Path;
use std::sync::Mutex;

use chrono::{NaiveDate, TimeDelta, Utc};
use gridops_core::accounting::{self, query_usage, Dim, IngestSummary, LogError, Metric, UsageFilter, UsageRecord, UsageStore, UsageTable};
use gridops_core::operations::{current_good, suggest_tickets, DraftTicket, NewTicket, Notification, ShiftRota, Ticket, TicketDesk, TicketState};
use gridops_core::probe::{ProbeCatalogue, ProbeResult, ResultStore, ServiceHealth, ServiceState, ServiceStatus};
use gridops_core::registry::{
    Action, Actor, Contact, ContactId, NodeId, NodeKind, Registry, RegistryNode, ResourceTotals, ServiceType, TopologySnapshot,
};
use gridops_core::sla::{availability_report, critical_services, quarterly_report, AvailabilityReport, QuarterId, ReportInputs};
use gridops_core::time::{Timestamp, Window};
use gridops_core::wms::{Alarm, AlarmRules, AlarmTransition, Collector, WmsSnapshot};
use gridops_core::Error as DomainError;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::SuiteError;
use crate::store::{Namespace, Store};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Monday starting the first duty week when no rota file is configured.
pub fn default_rota_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2008, 5, 5).expect("valid date")
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Manually driven clock for tests and reproducible runs.
#[derive(Debug)]
pub struct FixedClock(Mutex<Timestamp>);

impl FixedClock {
    pub fn new(at: Timestamp) -> Self {
        FixedClock(Mutex::new(at))
    }

    pub fn set(&self, at: Timestamp) {
        *self.0.lock().expect("clock lock") = at;
    }

    pub fn advance(&self, by: TimeDelta) {
        let mut t = self.0.lock().expect("clock lock");
        *t += by;
    }
}

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub actor: String,
    pub operation: String,
    pub target: String,
    pub outcome: String,
}

/// Runtime settings derived from the configuration and its side files.
#[derive(Debug, Clone)]
pub struct Settings {
    pub threshold: f64,
    pub quarter_epoch: NaiveDate,
    pub catalogue: ProbeCatalogue,
    pub rules: AlarmRules,
    pub rota: Option<ShiftRota>,
    pub snapshot_every: usize,
}

impl Settings {
    pub fn from_config(cfg: &Config) -> Result<Settings, SuiteError> {
        let catalogue = ProbeCatalogue::with_period(cfg.probes.default_period_min)?;
        let rules = match &cfg.alarms.rules {
            Some(p) => load_rules(p)?,
            None => AlarmRules::default(),
        };
        let rota = match &cfg.operations.rota {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| SuiteError::Config(format!("{}: {e}", p.display())))?;
                Some(serde_json::from_str(&text).map_err(|e| SuiteError::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        Ok(Settings {
            threshold: cfg.sla.threshold,
            quarter_epoch: cfg.sla.quarter_epoch,
            catalogue,
            rules,
            rota,
            snapshot_every: cfg.store.snapshot_every,
        })
    }
}

impl Default for Settings {
    fn default() -> Self {
        Settings::from_config(&Config::default()).expect("default configuration is valid")
    }
}

#[derive(Deserialize)]
struct RulesFile {
    rule: Vec<gridops_core::wms::AlarmRule>,
}

/// Alarm rules from a JSON array or a TOML file of `[[rule]]` tables.
pub fn load_rules(path: &Path) -> Result<AlarmRules, SuiteError> {
    let text = std::fs::read_to_string(path).map_err(|e| SuiteError::Config(format!("{}: {e}", path.display())))?;
    let bad = |e: String| SuiteError::Config(format!("{}: {e}", path.display()));
    let rules = if path.extension().is_some_and(|x| x == "toml") {
        toml::from_str::<RulesFile>(&text).map_err(|e| bad(e.to_string()))?.rule
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    };
    AlarmRules::new(rules).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum RegistryRecord {
    Node { node: RegistryNode, at: Timestamp },
    Contact { contact: Contact, at: Timestamp },
    Identity { subject_dn: String, contact: ContactId, at: Timestamp },
    Topology { snapshot: TopologySnapshot, at: Timestamp },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UsageBatch {
    serial: Vec<UsageRecord>,
    mpi: Vec<UsageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TicketRecord {
    ticket: Ticket,
    notification: Option<Notification>,
}

/// Contacts plus certificate mappings, as imported by the operator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactsFile {
    #[serde(default)]
    pub contacts: Vec<Contact>,
    #[serde(default)]
    pub identities: Vec<IdentityMapping>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityMapping {
    pub subject_dn: String,
    pub contact: ContactId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: Vec<LineError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingSummary {
    pub site: NodeId,
    pub records: usize,
    pub errors: usize,
    pub mpi_jobs: usize,
    pub replaced: usize,
    pub error_lines: Vec<LogError>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmsSummary {
    pub accepted: usize,
    pub rejected: Vec<LineError>,
    pub transitions: Vec<AlarmTransition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeTotals {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    #[serde(flatten)]
    pub totals: ResourceTotals,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryView {
    #[serde(flatten)]
    pub scope: ScopeTotals,
    pub children: Vec<ScopeTotals>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStatusView {
    pub site: NodeId,
    pub name: String,
    pub service_type: Option<ServiceType>,
    pub critical: bool,
    pub probe: Option<String>,
    #[serde(flatten)]
    pub status: ServiceStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteStatusView {
    pub site: NodeId,
    pub name: String,
    pub country: Option<NodeId>,
    /// Worst state over the site's critical services: DOWN > UNKNOWN > DEGRADED > UP.
    pub state: ServiceState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusView {
    pub as_of: Timestamp,
    pub services: Vec<ServiceStatusView>,
    pub sites: Vec<SiteStatusView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyWeek {
    pub week_start: NaiveDate,
    pub country: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodView {
    pub date: NaiveDate,
    pub country: NodeId,
    pub week_index: i64,
    /// This week followed by the next two.
    pub schedule: Vec<DutyWeek>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemHealth {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Worst-state-wins order: DOWN > UNKNOWN > DEGRADED > UP.
pub fn severity_rank(s: ServiceState) -> u8 {
    match s {
        ServiceState::Up => 0,
        ServiceState::Degraded => 1,
        ServiceState::Unknown => 2,
        ServiceState::Down => 3,
    }
}

pub fn actor_label(actor: &Actor) -> String {
    match actor {
        Actor::Operator => gridops_core::operations::OPERATOR.to_string(),
        Actor::Subject(dn) => dn.clone(),
    }
}

pub struct Suite {
    store: Store,
    clock: Box<dyn Clock>,
    settings: Settings,
    registry: Registry,
    results: ResultStore,
    usage: UsageStore,
    collector: Collector,
    desk: TicketDesk,
    audit: Vec<AuditEntry>,
    poisoned: Option<String>,
}

impl Suite {
    /// Opens the data directory and replays every namespace.
    pub fn open(data_dir: &Path, settings: Settings, clock: Box<dyn Clock>) -> Result<Suite, SuiteError> {
        let mut store = Store::open(data_dir, settings.snapshot_every)?;

        let loaded = store.load::<Registry, RegistryRecord>(Namespace::Registry)?;
        let mut registry = loaded.snapshot.unwrap_or_default();
        for rec in loaded.records {
            apply_registry(&mut registry, rec).map_err(|e| SuiteError::Store(format!("registry replay: {e}")))?;
        }

        let loaded = store.load::<ResultStore, ProbeResult>(Namespace::ProbeResults)?;
        let mut results = loaded.snapshot.unwrap_or_default();
        for r in loaded.records {
            results.append(r);
        }

        let loaded = store.load::<UsageStore, UsageBatch>(Namespace::Usage)?;
        let mut usage = loaded.snapshot.unwrap_or_default();
        for b in loaded.records {
            usage.absorb(b.serial, b.mpi);
        }

        let loaded = store.load::<Collector, WmsSnapshot>(Namespace::Wms)?;
        let mut collector = loaded.snapshot.unwrap_or_default();
        for s in loaded.records {
            collector.ingest_snapshot(s, &settings.rules, &registry).map_err(|e| SuiteError::Store(format!("wms replay: {e}")))?;
        }

        let loaded = store.load::<TicketDesk, TicketRecord>(Namespace::Tickets)?;
        let mut desk = loaded.snapshot.unwrap_or_default();
        for t in loaded.records {
            desk.restore(t.ticket, t.notification);
        }

        let loaded = store.load::<Vec<AuditEntry>, AuditEntry>(Namespace::Audit)?;
        let mut audit = loaded.snapshot.unwrap_or_default();
        audit.extend(loaded.records);

        Ok(Suite { store, clock, settings, registry, results, usage, collector, desk, audit, poisoned: None })
    }

    pub fn open_with_config(cfg: &Config, clock: Box<dyn Clock>) -> Result<Suite, SuiteError> {
        Suite::open(&cfg.store.data_dir, Settings::from_config(cfg)?, clock)
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn results(&self) -> &ResultStore {
        &self.results
    }

    pub fn usage(&self) -> &UsageStore {
        &self.usage
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn desk(&self) -> &TicketDesk {
        &self.desk
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn data_dir(&self) -> &Path {
        self.store.dir()
    }

    fn persist<R: Serialize>(&mut self, ns: Namespace, records: &[R]) -> Result<(), SuiteError> {
        if let Some(reason) = &self.poisoned {
            return Err(SuiteError::Store(reason.clone()));
        }
        let res = self.store.append(ns, records).and_then(|()| self.maybe_compact(ns));
        if let Err(e) = &res {
            self.poisoned = Some(e.to_string());
        }
        res
    }

    fn maybe_compact(&mut self, ns: Namespace) -> Result<(), SuiteError> {
        if !self.store.should_compact(ns) {
            return Ok(());
        }
        match ns {
            Namespace::Registry => self.store.compact(ns, &self.registry),
            Namespace::ProbeResults => self.store.compact(ns, &self.results),
            Namespace::Usage => self.store.compact(ns, &self.usage),
            Namespace::Wms => self.store.compact(ns, &self.collector),
            Namespace::Tickets => self.store.compact(ns, &self.desk),
            Namespace::Audit => self.store.compact(ns, &self.audit),
        }
    }

    /// Snapshots every namespace and empties the journals.
    pub fn compact_all(&mut self) -> Result<(), SuiteError> {
        self.store.compact(Namespace::Registry, &self.registry)?;
        self.store.compact(Namespace::ProbeResults, &self.results)?;
        self.store.compact(Namespace::Usage, &self.usage)?;
        self.store.compact(Namespace::Wms, &self.collector)?;
        self.store.compact(Namespace::Tickets, &self.desk)?;
        self.store.compact(Namespace::Audit, &self.audit)
    }

    /// Appends one audit entry describing a mutating call.
    pub fn record_audit(&mut self, actor: &str, operation: &str, target: &str, outcome: &str) -> Result<(), SuiteError> {
        let entry = AuditEntry {
            seq: self.audit.len() as u64 + 1,
            timestamp: self.now(),
            actor: actor.to_string(),
            operation: operation.to_string(),
            target: target.to_string(),
            outcome: outcome.to_string(),
        };
        self.audit.push(entry.clone());
        self.persist(Namespace::Audit, &[entry])
    }

    fn audited<T>(
        &mut self,
        actor: &Actor,
        operation: &str,
        target: &str,
        f: impl FnOnce(&mut Self) -> Result<T, SuiteError>,
    ) -> Result<T, SuiteError> {
        let res = f(self);
        let outcome = match &res {
            Ok(_) => "OK",
            Err(e) => e.code(),
        };
        self.record_audit(&actor_label(actor), operation, target, outcome)?;
        res
    }

    /// Fails with UNKNOWN_DN for subjects that are not mapped to a contact.
    fn require_mapped(&self, actor: &Actor) -> Result<(), SuiteError> {
        match actor {
            Actor::Subject(dn) if self.registry.resolve(dn).is_none() => Err(SuiteError::UnknownDn(dn.clone())),
            _ => Ok(()),
        }
    }

    fn require_edit(&self, actor: &Actor, node: &NodeId) -> Result<(), SuiteError> {
        match actor {
            Actor::Operator => Ok(()),
            Actor::Subject(dn) => {
                if self.registry.check_authz(dn, Action::Edit, node)? {
                    Ok(())
                } else {
                    Err(DomainError::AuthzDenied.into())
                }
            }
        }
    }

    // ---- registry -------------------------------------------------------

    pub fn upsert_node(&mut self, actor: &Actor, node: RegistryNode) -> Result<NodeId, SuiteError> {
        let target = node.id.to_string();
        self.audited(actor, "upsert_node", &target, |s| {
            s.require_mapped(actor)?;
            let at = s.now();
            let id = s.registry.upsert_node(actor, node.clone(), at)?;
            s.persist(Namespace::Registry, &[RegistryRecord::Node { node, at }])?;
            Ok(id)
        })
    }

    pub fn import_topology(&mut self, snapshot: TopologySnapshot) -> Result<usize, SuiteError> {
        let target = format!("{} nodes", snapshot.nodes.len());
        self.audited(&Actor::Operator, "import_topology", &target, |s| {
            let at = s.now();
            let n = s.registry.import_topology(&snapshot, at)?;
            s.persist(Namespace::Registry, &[RegistryRecord::Topology { snapshot, at }])?;
            Ok(n)
        })
    }

    pub fn import_contacts(&mut self, file: ContactsFile) -> Result<usize, SuiteError> {
        let target = format!("{} contacts, {} identities", file.contacts.len(), file.identities.len());
        self.audited(&Actor::Operator, "import_contacts", &target, |s| {
            let at = s.now();
            let mut staged = s.registry.clone();
            let mut records = Vec::new();
            for contact in file.contacts {
                staged.upsert_contact(&Actor::Operator, contact.clone(), at)?;
                records.push(RegistryRecord::Contact { contact, at });
            }
            for m in file.identities {
                staged.map_identity(&Actor::Operator, &m.subject_dn, &m.contact, at)?;
                records.push(RegistryRecord::Identity { subject_dn: m.subject_dn, contact: m.contact, at });
            }
            s.registry = staged;
            s.persist(Namespace::Registry, &records)?;
            Ok(records.len())
        })
    }

    // ---- probe results --------------------------------------------------

    /// Validates and stores results. Each item is judged on its own; the call
    /// fails as a whole only for unmapped subjects.
    pub fn record_results(&mut self, actor: &Actor, items: Vec<Result<ProbeResult, LineError>>) -> Result<ResultsSummary, SuiteError> {
        let target = format!("{} results", items.len());
        self.audited(actor, "record_results", &target, |s| {
            s.require_mapped(actor)?;
            let now = s.now();
            let mut summary = ResultsSummary { accepted: 0, duplicates: 0, rejected: Vec::new() };
            let mut fresh = Vec::new();
            for (i, item) in items.into_iter().enumerate() {
                let line = i + 1;
                let r = match item {
                    Ok(r) => r,
                    Err(e) => {
                        summary.rejected.push(e);
                        continue;
                    }
                };
                let reject = |e: SuiteError| LineError { line, code: e.code().to_string(), message: e.to_string() };
                if s.registry.get(&r.service).is_some() {
                    if let Err(e) = s.require_edit(actor, &r.service) {
                        summary.rejected.push(reject(e));
                        continue;
                    }
                }
                if s.results.contains(&r) {
                    summary.duplicates += 1;
                    continue;
                }
                match s.results.record_result(r.clone(), &s.registry, now) {
                    Ok(_) => {
                        summary.accepted += 1;
                        fresh.push(r);
                    }
                    Err(e) => summary.rejected.push(reject(e.into())),
                }
            }
            s.persist(Namespace::ProbeResults, &fresh)?;
            Ok(summary)
        })
    }

    /// Stores results produced by the local scheduler.
    pub fn record_scheduled(&mut self, results: Vec<ProbeResult>) -> Result<usize, SuiteError> {
        if results.is_empty() {
            return Ok(0);
        }
        let n = results.len();
        let items = results.into_iter().map(Ok).collect();
        let summary = self.record_results(&Actor::Operator, items)?;
        debug_assert!(summary.accepted + summary.duplicates + summary.rejected.len() == n);
        Ok(summary.accepted)
    }

    // ---- accounting -----------------------------------------------------

    pub fn ingest_accounting(&mut self, actor: &Actor, site: &NodeId, text: &str) -> Result<AccountingSummary, SuiteError> {
        self.audited(actor, "ingest_accounting", site.as_str(), |s| {
            s.require_mapped(actor)?;
            match s.registry.get(site) {
                Some(n) if n.kind == NodeKind::Site => {}
                _ => return Err(DomainError::UnknownSite(site.clone()).into()),
            }
            s.require_edit(actor, site)?;
            let (jobs, errors) = accounting::parse_batch_log(site, text);
            let (serial, mpi) = accounting::streams(&jobs, &s.registry)?;
            let IngestSummary { jobs: records, mpi_jobs, replaced } = s.usage.absorb(serial.clone(), mpi.clone());
            s.persist(Namespace::Usage, &[UsageBatch { serial, mpi }])?;
            Ok(AccountingSummary {
                site: site.clone(),
                records,
                errors: errors.len(),
                mpi_jobs,
                replaced,
                summary: format!("{records} records, {} errors", errors.len()),
                error_lines: errors,
            })
        })
    }

    // ---- WMS ------------------------------------------------------------

    pub fn ingest_wms(&mut self, actor: &Actor, items: Vec<Result<WmsSnapshot, LineError>>) -> Result<WmsSummary, SuiteError> {
        let target = format!("{} snapshots", items.len());
        self.audited(actor, "ingest_wms", &target, |s| {
            s.require_mapped(actor)?;
            let mut out = WmsSummary { accepted: 0, rejected: Vec::new(), transitions: Vec::new() };
            let mut fresh = Vec::new();
            for (i, item) in items.into_iter().enumerate() {
                let line = i + 1;
                let snap = match item {
                    Ok(x) => x,
                    Err(e) => {
                        out.rejected.push(e);
                        continue;
                    }
                };
                let reject = |e: SuiteError| LineError { line, code: e.code().to_string(), message: e.to_string() };
                if s.registry.get(&snap.wms).is_some() {
                    if let Err(e) = s.require_edit(actor, &snap.wms) {
                        out.rejected.push(reject(e));
                        continue;
                    }
                }
                match s.collector.ingest_snapshot(snap.clone(), &s.settings.rules, &s.registry) {
                    Ok(tr) => {
                        out.accepted += 1;
                        out.transitions.extend(tr);
                        fresh.push(snap);
                    }
                    Err(e) => out.rejected.push(reject(e.into())),
                }
            }
            s.persist(Namespace::Wms, &fresh)?;
            Ok(out)
        })
    }

    // ---- tickets --------------------------------------------------------

    fn persist_ticket(&mut self, ticket: &Ticket) -> Result<(), SuiteError> {
        let notification = self.desk.outbox().last().filter(|n| n.ticket == ticket.id).cloned();
        self.persist(Namespace::Tickets, &[TicketRecord { ticket: ticket.clone(), notification }])
    }

    pub fn open_ticket(&mut self, actor: &Actor, request: NewTicket) -> Result<Ticket, SuiteError> {
        let target = request.site.to_string();
        self.audited(actor, "open_ticket", &target, |s| {
            s.require_mapped(actor)?;
            let now = s.now();
            let ticket = s.desk.open_ticket(&s.registry, actor, request, now)?;
            s.persist_ticket(&ticket)?;
            Ok(ticket)
        })
    }

    pub fn transition_ticket(&mut self, actor: &Actor, id: u64, to: TicketState, note: &str) -> Result<Ticket, SuiteError> {
        self.audited(actor, "transition_ticket", &format!("ticket {id} -> {}", to.as_str()), |s| {
            s.require_mapped(actor)?;
            let now = s.now();
            let ticket = s.desk.transition_ticket(&s.registry, actor, id, to, note, now)?;
            s.persist_ticket(&ticket)?;
            Ok(ticket)
        })
    }

    // ---- queries --------------------------------------------------------

    /// The given scope, or the single root of the registry.
    pub fn scope_or_root(&self, scope: Option<&NodeId>) -> Result<NodeId, SuiteError> {
        if let Some(s) = scope {
            self.registry.node(s)?;
            return Ok(s.clone());
        }
        let mut roots = self.registry.roots();
        match (roots.next(), roots.next()) {
            (Some(r), None) => Ok(r.id.clone()),
            (None, _) => Err(SuiteError::bad_request("EMPTY_REGISTRY", "the registry has no nodes")),
            (Some(_), Some(_)) => Err(SuiteError::bad_request("SCOPE_REQUIRED", "several roots; pass a scope")),
        }
    }

    pub fn topology(&self, scope: Option<&NodeId>) -> Result<TopologySnapshot, SuiteError> {
        let scope = self.scope_or_root(scope)?;
        Ok(self.registry.export_topology(&scope)?)
    }

    fn totals(&self, node: &RegistryNode) -> Result<ScopeTotals, SuiteError> {
        Ok(ScopeTotals { id: node.id.clone(), name: node.name.clone(), kind: node.kind, totals: self.registry.resource_summary(&node.id)? })
    }

    pub fn summary(&self, scope: Option<&NodeId>) -> Result<SummaryView, SuiteError> {
        let scope = self.scope_or_root(scope)?;
        let node = self.registry.node(&scope)?;
        let children =
            self.registry.children(&scope).filter(|c| c.kind != NodeKind::Service).map(|c| self.totals(c)).collect::<Result<Vec<_>, _>>()?;
        Ok(SummaryView { scope: self.totals(node)?, children })
    }

    pub fn status(&self, scope: Option<&NodeId>) -> Result<StatusView, SuiteError> {
        let scope = self.scope_or_root(scope)?;
        let now = self.now();
        let mut services = Vec::new();
        let mut sites = Vec::new();
        let scope_node = self.registry.node(&scope)?;
        let site_nodes: Vec<&RegistryNode> = match scope_node.kind {
            NodeKind::Service => scope_node.parent.as_ref().and_then(|p| self.registry.get(p)).into_iter().collect(),
            _ => self.registry.sites_under(&scope),
        };
        for site in site_nodes.into_iter().filter(|s| s.is_active()) {
            let mut worst: Option<ServiceState> = None;
            let critical: Vec<NodeId> = critical_services(&self.registry, &site.id).into_iter().map(|n| n.id.clone()).collect();
            for svc in self.registry.services_of(&site.id).filter(|n| n.is_active()) {
                if scope_node.kind == NodeKind::Service && svc.id != scope {
                    continue;
                }
                let probe = self.settings.catalogue.probe_for(svc);
                let status = match probe {
                    Some(p) => self.results.latest_status(&self.registry, &svc.id, p, now)?,
                    None => ServiceStatus { service: svc.id.clone(), state: ServiceState::Unknown, as_of: now, source_result: None },
                };
                if critical.contains(&svc.id) {
                    worst = Some(match worst {
                        Some(w) if severity_rank(w) >= severity_rank(status.state) => w,
                        _ => status.state,
                    });
                }
                services.push(ServiceStatusView {
                    site: site.id.clone(),
                    name: svc.name.clone(),
                    service_type: svc.service_type(),
                    critical: svc.is_critical(),
                    probe: probe.map(|p| p.probe_id.clone()),
                    status,
                });
            }
            sites.push(SiteStatusView {
                site: site.id.clone(),
                name: site.name.clone(),
                country: self.registry.ancestor_of_kind(&site.id, NodeKind::Country).map(|c| c.id.clone()),
                state: worst.unwrap_or(ServiceState::Unknown),
            });
        }
        Ok(StatusView { as_of: now, services, sites })
    }

    fn report_inputs(&self) -> ReportInputs<'_> {
        ReportInputs { registry: &self.registry, results: &self.results, catalogue: &self.settings.catalogue, threshold: self.settings.threshold }
    }

    pub fn availability(&self, scope: Option<&NodeId>, window: Window) -> Result<AvailabilityReport, SuiteError> {
        Ok(availability_report(self.report_inputs(), scope, window)?)
    }

    pub fn quarter_report(&self, quarter: u32) -> Result<AvailabilityReport, SuiteError> {
        let q = QuarterId::new(quarter)?;
        Ok(quarterly_report(q, self.settings.quarter_epoch, self.report_inputs())?)
    }

    pub fn usage_table(&self, filter: &UsageFilter, rows: Dim, cols: Dim, metric: Metric) -> Result<UsageTable, SuiteError> {
        Ok(query_usage(&self.usage.merged(), filter, rows, cols, metric)?)
    }

    pub fn wms_history(&self, wms: &NodeId, metric: &str, window: Window) -> Result<Vec<(Timestamp, f64)>, SuiteError> {
        Ok(self.collector.wms_history(wms, metric, window, &self.registry)?)
    }

    pub fn alarms(&self) -> &[Alarm] {
        self.collector.alarms()
    }

    pub fn tickets(&self, state: Option<TicketState>) -> Vec<Ticket> {
        self.desk.tickets().filter(|t| state.is_none_or(|s| t.state == s)).cloned().collect()
    }

    /// Configured rota, or the registry's countries in id order.
    pub fn rota(&self) -> Result<ShiftRota, SuiteError> {
        if let Some(r) = &self.settings.rota {
            return Ok(r.clone());
        }
        let countries: Vec<NodeId> = self.registry.nodes().filter(|n| n.kind == NodeKind::Country).map(|n| n.id.clone()).collect();
        Ok(ShiftRota::new(countries, default_rota_epoch())?)
    }

    pub fn good(&self, date: Option<NaiveDate>) -> Result<GoodView, SuiteError> {
        let date = date.unwrap_or_else(|| self.now().date_naive());
        let rota = self.rota()?;
        let country = current_good(date, &rota)?;
        let week_index = rota.week_index(date)?;
        let first = rota.epoch_week_start() + TimeDelta::weeks(week_index);
        let schedule = (0..3)
            .map(|k| {
                let week_start = first + TimeDelta::weeks(k);
                Ok(DutyWeek { week_start, country: current_good(week_start, &rota)? })
            })
            .collect::<Result<Vec<_>, DomainError>>()?;
        Ok(GoodView { date, country, week_index, schedule })
    }

    /// Health of every active critical service at the current time.
    pub fn critical_health(&self) -> Result<Vec<ServiceHealth>, SuiteError> {
        let now = self.now();
        let mut out = Vec::new();
        for site in self.registry.nodes().filter(|n| n.kind == NodeKind::Site && n.is_active()) {
            for svc in critical_services(&self.registry, &site.id) {
                if let Some(p) = self.settings.catalogue.probe_for(svc) {
                    out.push(self.results.health(&self.registry, &svc.id, p, now)?);
                }
            }
        }
        Ok(out)
    }

    pub fn suggestions(&self) -> Result<Vec<DraftTicket>, SuiteError> {
        let health = self.critical_health()?;
        Ok(suggest_tickets(&self.registry, &health, self.collector.active_alarms(), self.desk.tickets()))
    }

    pub fn store_health(&self) -> SubsystemHealth {
        let reason = match &self.poisoned {
            Some(r) => Some(r.clone()),
            None => self.store.check().err(),
        };
        SubsystemHealth { ok: reason.is_none(), reason }
    }
}

fn apply_registry(registry: &mut Registry, rec: RegistryRecord) -> Result<(), DomainError> {
    let op = Actor::Operator;
    match rec {
        RegistryRecord::Node { node, at } => registry.upsert_node(&op, node, at).map(drop),
        RegistryRecord::Contact { contact, at } => registry.upsert_contact(&op, contact, at).map(drop),
        RegistryRecord::Identity { subject_dn, contact, at } => registry.map_identity(&op, &subject_dn, &contact, at),
        RegistryRecord::Topology { snapshot, at } => registry.import_topology(&snapshot, at).map(drop),
    }
}
