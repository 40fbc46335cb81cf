//! Availability figures from probe results.
//!
//! Time is discretized into whole UTC minutes. Every minute of a window takes
//! the state of the newest result at or before it, or UNKNOWN once that result
//! is two probe periods old. UNKNOWN counts as unavailable. A site is
//! available in a minute iff every one of its critical services is, and
//! aggregates above the site level are means weighted by site CPU counts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use chrono::{Months, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{ProbeCatalogue, ProbeDefinition, ProbeResult, ResultStore, ServiceState};
use crate::registry::{NodeId, NodeKind, Registry, RegistryNode};
use crate::time::{minute_of, Window};

pub const DEFAULT_SLA_THRESHOLD: f64 = 0.80;

/// First day of project quarter 1.
pub fn default_quarter_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2008, 5, 1).expect("valid date")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_minute: i64,
    pub end_minute: i64,
    pub state: ServiceState,
}

impl Segment {
    pub fn minutes(&self) -> i64 {
        self.end_minute - self.start_minute
    }
}

/// A window partitioned into contiguous, non-overlapping state segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusTimeline {
    pub service: NodeId,
    pub window: Window,
    pub segments: Vec<Segment>,
}

impl StatusTimeline {
    fn builder(service: NodeId, window: Window) -> TimelineBuilder {
        TimelineBuilder { timeline: StatusTimeline { service, window, segments: Vec::new() } }
    }

    /// A timeline that is UNKNOWN throughout.
    pub fn unknown(service: NodeId, window: Window) -> Self {
        let mut b = Self::builder(service, window);
        b.push(window.start_minute(), window.end_minute(), ServiceState::Unknown);
        b.finish()
    }

    pub fn state_at(&self, minute: i64) -> ServiceState {
        let i = self.segments.partition_point(|s| s.end_minute <= minute);
        match self.segments.get(i) {
            Some(s) if s.start_minute <= minute => s.state,
            _ => ServiceState::Unknown,
        }
    }

    pub fn minutes_where(&self, pred: impl Fn(ServiceState) -> bool) -> i64 {
        self.segments.iter().filter(|s| pred(s.state)).map(Segment::minutes).sum()
    }

    pub fn available_minutes(&self) -> i64 {
        self.minutes_where(ServiceState::is_available)
    }

    /// Fraction of the window with a non-UNKNOWN state.
    pub fn coverage(&self) -> f64 {
        self.minutes_where(|s| s != ServiceState::Unknown) as f64 / self.window.minutes() as f64
    }

    /// Segments are contiguous, non-empty, maximal and exactly cover the window.
    pub fn is_well_formed(&self) -> bool {
        let mut cursor = self.window.start_minute();
        let mut prev: Option<ServiceState> = None;
        for s in &self.segments {
            if s.start_minute != cursor || s.end_minute <= s.start_minute || prev == Some(s.state) {
                return false;
            }
            cursor = s.end_minute;
            prev = Some(s.state);
        }
        cursor == self.window.end_minute()
    }
}

struct TimelineBuilder {
    timeline: StatusTimeline,
}

impl TimelineBuilder {
    /// Appends `[start, end)` clipped to the window, merging with the previous
    /// segment when states agree. Calls must be made in time order.
    fn push(&mut self, start: i64, end: i64, state: ServiceState) {
        let start = start.max(self.timeline.window.start_minute());
        let end = end.min(self.timeline.window.end_minute());
        if end <= start {
            return;
        }
        match self.timeline.segments.last_mut() {
            Some(last) if last.state == state && last.end_minute == start => last.end_minute = end,
            _ => self.timeline.segments.push(Segment { start_minute: start, end_minute: end, state }),
        }
    }

    fn finish(self) -> StatusTimeline {
        self.timeline
    }
}

/// Builds the minute-resolution timeline of `probe` on `service` over `window`.
///
/// `results` must be sorted by timestamp; entries for other services or probes
/// are ignored, and results before the window carry into it.
pub fn build_timeline(service: &NodeId, window: Window, results: &[ProbeResult], probe: &ProbeDefinition) -> Result<StatusTimeline> {
    if results.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::UnsortedResults);
    }
    // Minutes of staleness: a result at minute r stops counting at r + stale.
    let stale = (2 * i64::from(probe.period_s) + 59) / 60;
    // Newest result per minute; within a minute the later one wins.
    let mut points: Vec<(i64, ServiceState)> = Vec::new();
    for r in results.iter().filter(|r| &r.service == service && r.probe_id == probe.probe_id) {
        let m = minute_of(r.timestamp);
        if m >= window.end_minute() {
            break;
        }
        match points.last_mut() {
            Some(last) if last.0 == m => last.1 = r.status.into(),
            _ => points.push((m, r.status.into())),
        }
    }

    let mut b = StatusTimeline::builder(service.clone(), window);
    let first = points.first().map(|p| p.0).unwrap_or(window.end_minute());
    b.push(window.start_minute(), first, ServiceState::Unknown);
    for (i, &(minute, state)) in points.iter().enumerate() {
        let next = points.get(i + 1).map(|p| p.0).unwrap_or(window.end_minute());
        let fresh_until = (minute + stale).min(next);
        b.push(minute, fresh_until, state);
        b.push(fresh_until, next, ServiceState::Unknown);
    }
    Ok(b.finish())
}

/// Fraction of the window spent UP or DEGRADED.
pub fn service_availability(timeline: &StatusTimeline) -> f64 {
    timeline.available_minutes() as f64 / timeline.window.minutes() as f64
}

/// Combines per-minute states of a site's critical services.
fn combine(states: impl Iterator<Item = ServiceState>) -> ServiceState {
    let mut down = false;
    let mut unknown = false;
    let mut degraded = false;
    for s in states {
        match s {
            ServiceState::Down => down = true,
            ServiceState::Unknown => unknown = true,
            ServiceState::Degraded => degraded = true,
            ServiceState::Up => {}
        }
    }
    if down {
        ServiceState::Down
    } else if unknown {
        ServiceState::Unknown
    } else if degraded {
        ServiceState::Degraded
    } else {
        ServiceState::Up
    }
}

/// ACTIVE critical services of a site, ordered by id.
pub fn critical_services<'a>(registry: &'a Registry, site: &NodeId) -> Vec<&'a RegistryNode> {
    let mut v: Vec<&RegistryNode> = registry.services_of(site).filter(|s| s.is_active() && s.is_critical()).collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Site timeline: AND over critical services. A critical service without a
/// timeline is treated as UNKNOWN throughout.
pub fn site_timeline(registry: &Registry, site: &NodeId, window: Window, timelines: &BTreeMap<NodeId, StatusTimeline>) -> Result<StatusTimeline> {
    match registry.get(site) {
        Some(n) if n.kind == NodeKind::Site => {}
        _ => return Err(Error::UnknownSite(site.clone())),
    }
    let critical = critical_services(registry, site);
    if critical.is_empty() {
        return Err(Error::NoCriticalServices(site.clone()));
    }
    let parts: Vec<Option<&StatusTimeline>> = critical.iter().map(|s| timelines.get(&s.id)).collect();
    let mut cuts: BTreeSet<i64> = BTreeSet::new();
    cuts.insert(window.start_minute());
    cuts.insert(window.end_minute());
    for tl in parts.iter().flatten() {
        for seg in &tl.segments {
            for m in [seg.start_minute, seg.end_minute] {
                if m > window.start_minute() && m < window.end_minute() {
                    cuts.insert(m);
                }
            }
        }
    }
    let cuts: Vec<i64> = cuts.into_iter().collect();
    let mut b = StatusTimeline::builder(site.clone(), window);
    for pair in cuts.windows(2) {
        let (a, z) = (pair[0], pair[1]);
        let state = combine(parts.iter().map(|p| p.map_or(ServiceState::Unknown, |tl| tl.state_at(a))));
        b.push(a, z, state);
    }
    Ok(b.finish())
}

/// Fraction of minutes in which every critical service of the site is UP or DEGRADED.
pub fn site_availability(registry: &Registry, site: &NodeId, window: Window, timelines: &BTreeMap<NodeId, StatusTimeline>) -> Result<f64> {
    Ok(service_availability(&site_timeline(registry, site, window, timelines)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityFigure {
    pub scope: NodeId,
    pub window: Window,
    pub availability: f64,
    pub weight: u64,
}

/// CPU-weighted mean of the figures of the ACTIVE sites under `scope`.
///
/// Returns availability 0 with weight 0 when the sites hold no CPUs.
pub fn weighted_availability(
    registry: &Registry,
    scope: &NodeId,
    window: Window,
    site_figures: &BTreeMap<NodeId, f64>,
) -> Result<AvailabilityFigure> {
    registry.node(scope)?;
    let mut weight: u64 = 0;
    let mut acc = 0.0f64;
    for site in registry.sites_under(scope).into_iter().filter(|s| s.is_active()) {
        let a = *site_figures.get(&site.id).ok_or_else(|| Error::MissingSiteFigure(site.id.clone()))?;
        let cpus = site.cpu_count().unwrap_or(0);
        weight += cpus;
        acc += cpus as f64 * a;
    }
    let availability = if weight == 0 { 0.0 } else { acc / weight as f64 };
    Ok(AvailabilityFigure { scope: scope.clone(), window, availability, weight })
}

/// Weighted mean of `(weight, value)` pairs; zero when the total weight is zero.
pub fn weighted_mean(pairs: impl IntoIterator<Item = (u64, f64)>) -> (f64, u64) {
    let mut weight = 0u64;
    let mut acc = 0.0f64;
    for (w, v) in pairs {
        weight += w;
        acc += w as f64 * v;
    }
    if weight == 0 {
        (0.0, 0)
    } else {
        (acc / weight as f64, weight)
    }
}

/// Project quarter number, counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuarterId(u32);

impl QuarterId {
    pub fn new(index: u32) -> Result<Self> {
        if index == 0 {
            return Err(Error::InvalidQuarter("quarters are numbered from 1".to_string()));
        }
        Ok(QuarterId(index))
    }

    pub fn index(self) -> u32 {
        self.0
    }

    /// `[epoch + 3(index - 1) months, + 3 months)` at midnight UTC.
    pub fn window(self, epoch: NaiveDate) -> Result<Window> {
        let overflow = || Error::InvalidQuarter(format!("Q{} is out of range", self.0));
        let start = epoch.checked_add_months(Months::new(3 * (self.0 - 1))).ok_or_else(overflow)?;
        let end = start.checked_add_months(Months::new(3)).ok_or_else(overflow)?;
        Window::new(start.and_time(NaiveTime::MIN).and_utc(), end.and_time(NaiveTime::MIN).and_utc())
    }
}

impl fmt::Display for QuarterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScopeKind {
    Service,
    Site,
    Country,
    Infrastructure,
}

impl ScopeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScopeKind::Service => "SERVICE",
            ScopeKind::Site => "SITE",
            ScopeKind::Country => "COUNTRY",
            ScopeKind::Infrastructure => "INFRASTRUCTURE",
        }
    }
}

/// One row of an availability report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeFigure {
    pub scope: NodeId,
    pub kind: ScopeKind,
    pub name: String,
    pub availability: f64,
    pub weight: u64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub registry_version: u64,
    pub weight_basis: String,
    pub unknown_policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub quarter: Option<QuarterId>,
    pub window: Window,
    pub threshold: f64,
    pub per_service: Vec<ScopeFigure>,
    pub per_site: Vec<ScopeFigure>,
    pub per_country: Vec<ScopeFigure>,
    pub infrastructure: ScopeFigure,
    pub sla_conformance: BTreeMap<NodeId, bool>,
    pub coverage: f64,
    pub metadata: ReportMetadata,
}

impl AvailabilityReport {
    /// All rows in report order: services, sites, countries, infrastructure.
    pub fn rows(&self) -> impl Iterator<Item = &ScopeFigure> {
        self.per_service.iter().chain(self.per_site.iter()).chain(self.per_country.iter()).chain(core::iter::once(&self.infrastructure))
    }
}

/// Inputs shared by every report computation.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub registry: &'a Registry,
    pub results: &'a ResultStore,
    pub catalogue: &'a ProbeCatalogue,
    pub threshold: f64,
}

/// Availability figures for every active service, site and country under
/// `scope` (every root when `None`) over `window`.
///
/// Sites without critical services have nothing that could demonstrate
/// availability and are reported at 0 with zero coverage.
pub fn availability_report(inputs: ReportInputs<'_>, scope: Option<&NodeId>, window: Window) -> Result<AvailabilityReport> {
    let registry = inputs.registry;
    let roots: Vec<NodeId> = match scope {
        Some(s) => {
            registry.node(s)?;
            alloc::vec![s.clone()]
        }
        None => registry.roots().map(|r| r.id.clone()).collect(),
    };
    let mut sites: Vec<&RegistryNode> = Vec::new();
    let mut countries: Vec<&RegistryNode> = Vec::new();
    let mut services: Vec<&RegistryNode> = Vec::new();
    for root in &roots {
        for n in registry.subtree(root) {
            match n.kind {
                NodeKind::Country => countries.push(n),
                NodeKind::Site if n.is_active() => sites.push(n),
                NodeKind::Service if n.is_active() => {
                    let site_active = n.parent.as_ref().and_then(|p| registry.get(p)).is_some_and(|s| s.is_active());
                    if site_active {
                        services.push(n)
                    }
                }
                _ => {}
            }
        }
    }
    sites.sort_by(|a, b| a.id.cmp(&b.id));
    countries.sort_by(|a, b| a.id.cmp(&b.id));
    services.sort_by(|a, b| a.id.cmp(&b.id));

    let mut timelines: BTreeMap<NodeId, StatusTimeline> = BTreeMap::new();
    let mut per_service = Vec::new();
    for svc in &services {
        let site_cpus = svc.parent.as_ref().and_then(|p| registry.get(p)).and_then(RegistryNode::cpu_count).unwrap_or(0);
        let tl = match inputs.catalogue.probe_for(svc) {
            Some(probe) => {
                let series = inputs.results.series_vec(&svc.id, &probe.probe_id);
                build_timeline(&svc.id, window, &series, probe)?
            }
            None => StatusTimeline::unknown(svc.id.clone(), window),
        };
        per_service.push(ScopeFigure {
            scope: svc.id.clone(),
            kind: ScopeKind::Service,
            name: svc.name.clone(),
            availability: service_availability(&tl),
            weight: site_cpus,
            coverage: tl.coverage(),
        });
        timelines.insert(svc.id.clone(), tl);
    }

    let mut per_site = Vec::new();
    let mut site_values: BTreeMap<NodeId, (u64, f64, f64)> = BTreeMap::new();
    let mut sla_conformance = BTreeMap::new();
    for site in &sites {
        let cpus = site.cpu_count().unwrap_or(0);
        let (availability, coverage) = match site_timeline(registry, &site.id, window, &timelines) {
            Ok(tl) => (service_availability(&tl), tl.coverage()),
            Err(Error::NoCriticalServices(_)) => (0.0, 0.0),
            Err(e) => return Err(e),
        };
        site_values.insert(site.id.clone(), (cpus, availability, coverage));
        sla_conformance.insert(site.id.clone(), availability >= inputs.threshold);
        per_site.push(ScopeFigure { scope: site.id.clone(), kind: ScopeKind::Site, name: site.name.clone(), availability, weight: cpus, coverage });
    }

    let mut per_country = Vec::new();
    for country in &countries {
        let members: Vec<(u64, f64, f64)> = registry.sites_under(&country.id).into_iter().filter_map(|s| site_values.get(&s.id).copied()).collect();
        let (availability, weight) = weighted_mean(members.iter().map(|&(w, a, _)| (w, a)));
        let (coverage, _) = weighted_mean(members.iter().map(|&(w, _, c)| (w, c)));
        per_country.push(ScopeFigure {
            scope: country.id.clone(),
            kind: ScopeKind::Country,
            name: country.name.clone(),
            availability,
            weight,
            coverage,
        });
    }

    let (availability, weight, coverage) = if per_country.is_empty() {
        let (a, w) = weighted_mean(site_values.values().map(|&(w, a, _)| (w, a)));
        let (c, _) = weighted_mean(site_values.values().map(|&(w, _, c)| (w, c)));
        (a, w, c)
    } else {
        let (a, w) = weighted_mean(per_country.iter().map(|f| (f.weight, f.availability)));
        let (c, _) = weighted_mean(per_country.iter().map(|f| (f.weight, f.coverage)));
        (a, w, c)
    };
    let (scope_id, name) = match roots.as_slice() {
        [single] => (single.clone(), registry.get(single).map(|n| n.name.clone()).unwrap_or_default()),
        _ => (NodeId::new("infrastructure"), "infrastructure".to_string()),
    };
    let infrastructure = ScopeFigure { scope: scope_id, kind: ScopeKind::Infrastructure, name, availability, weight, coverage };

    Ok(AvailabilityReport {
        quarter: None,
        window,
        threshold: inputs.threshold,
        per_service,
        per_site,
        per_country,
        infrastructure,
        sla_conformance,
        coverage,
        metadata: ReportMetadata {
            registry_version: registry.version(),
            weight_basis: format!("site cpu_count at registry version {}", registry.version()),
            unknown_policy: "UNKNOWN counts as unavailable".to_string(),
        },
    })
}

/// Report for a project quarter over the whole registry.
pub fn quarterly_report(quarter: QuarterId, epoch: NaiveDate, inputs: ReportInputs<'_>) -> Result<AvailabilityReport> {
    let window = quarter.window(epoch)?;
    let mut report = availability_report(inputs, None, window)?;
    report.quarter = Some(quarter);
    Ok(report)
}
