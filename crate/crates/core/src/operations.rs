//! Operator-on-duty rota, trouble tickets and their resolution statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{ResultId, ServiceHealth, ServiceState};
use crate::registry::{Action, Actor, ContactId, NodeId, NodeKind, Registry};
use crate::time::{business_days_between, Timestamp, Window};
use crate::wms::{Alarm, AlarmState};

/// Party recorded for actions taken by the local operator.
pub const OPERATOR: &str = "operator";

/// Weekly rotation of the operator-on-duty role across countries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRota")]
pub struct ShiftRota {
    countries: Vec<NodeId>,
    epoch_week_start: NaiveDate,
}

#[derive(Deserialize)]
struct RawRota {
    countries: Vec<NodeId>,
    epoch_week_start: NaiveDate,
}

impl TryFrom<RawRota> for ShiftRota {
    type Error = Error;

    fn try_from(raw: RawRota) -> Result<Self> {
        ShiftRota::new(raw.countries, raw.epoch_week_start)
    }
}

impl ShiftRota {
    pub const SHIFT_DAYS: i64 = 7;

    pub fn new(countries: Vec<NodeId>, epoch_week_start: NaiveDate) -> Result<Self> {
        if countries.is_empty() {
            return Err(Error::InvalidRota("no countries".to_string()));
        }
        let distinct: BTreeSet<&NodeId> = countries.iter().collect();
        if distinct.len() != countries.len() {
            return Err(Error::InvalidRota("duplicate country".to_string()));
        }
        if epoch_week_start.weekday() != Weekday::Mon {
            return Err(Error::InvalidRota(format!("{epoch_week_start} is not a Monday")));
        }
        Ok(ShiftRota { countries, epoch_week_start })
    }

    pub fn countries(&self) -> &[NodeId] {
        &self.countries
    }

    pub fn epoch_week_start(&self) -> NaiveDate {
        self.epoch_week_start
    }

    pub fn week_index(&self, date: NaiveDate) -> Result<i64> {
        if date < self.epoch_week_start {
            return Err(Error::DateBeforeEpoch);
        }
        Ok((date - self.epoch_week_start).num_days() / Self::SHIFT_DAYS)
    }
}

/// Country on duty during the week containing `date`.
pub fn current_good(date: NaiveDate, rota: &ShiftRota) -> Result<NodeId> {
    let week = rota.week_index(date)?;
    Ok(rota.countries[(week % rota.countries.len() as i64) as usize].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Simple,
    Complex,
}

impl Severity {
    /// Resolution target in business days.
    pub fn target_days(self) -> u32 {
        match self {
            Severity::Simple => 1,
            Severity::Complex => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    New,
    Assigned,
    InProgress,
    Solved,
    Verified,
    Reopened,
}

impl TicketState {
    pub fn as_str(self) -> &'static str {
        match self {
            TicketState::New => "NEW",
            TicketState::Assigned => "ASSIGNED",
            TicketState::InProgress => "IN_PROGRESS",
            TicketState::Solved => "SOLVED",
            TicketState::Verified => "VERIFIED",
            TicketState::Reopened => "REOPENED",
        }
    }

    pub fn can_become(self, next: TicketState) -> bool {
        use TicketState::*;
        matches!(
            (self, next),
            (New, Assigned) | (Assigned, InProgress) | (InProgress, Solved) | (Solved, Verified) | (Solved, Reopened) | (Reopened, InProgress)
        )
    }

    /// Still awaiting a fix.
    pub fn is_open(self) -> bool {
        !matches!(self, TicketState::Solved | TicketState::Verified)
    }
}

impl core::str::FromStr for TicketState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use TicketState::*;
        [New, Assigned, InProgress, Solved, Verified, Reopened]
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidAttribute { key: "state".to_string(), reason: format!("{s:?}") })
    }
}

/// Monitoring fact a ticket points at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceRef {
    ProbeResult { service: NodeId, result: Option<ResultId> },
    Alarm { wms: NodeId, metric: String, raised_at: Timestamp },
}

/// Evidence class used to avoid duplicate tickets for the same problem.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceClass {
    ServiceDown { service: NodeId },
    Alarm { wms: NodeId, metric: String },
}

impl EvidenceRef {
    pub fn class(&self) -> EvidenceClass {
        match self {
            EvidenceRef::ProbeResult { service, .. } => EvidenceClass::ServiceDown { service: service.clone() },
            EvidenceRef::Alarm { wms, metric, .. } => EvidenceClass::Alarm { wms: wms.clone(), metric: metric.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketEvent {
    pub at: Timestamp,
    pub actor: String,
    pub from: Option<TicketState>,
    pub to: TicketState,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: u64,
    pub site: NodeId,
    pub summary: String,
    pub opened_by: String,
    pub assignee: ContactId,
    pub severity: Severity,
    pub state: TicketState,
    pub opened_at: Timestamp,
    pub solved_at: Option<Timestamp>,
    pub closed_at: Option<Timestamp>,
    pub linked_evidence: Vec<EvidenceRef>,
    pub history: Vec<TicketEvent>,
}

/// State, `solved_at` and `closed_at` implied by a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replayed {
    pub state: TicketState,
    pub solved_at: Option<Timestamp>,
    pub closed_at: Option<Timestamp>,
}

impl Ticket {
    pub fn replay(history: &[TicketEvent]) -> Option<Replayed> {
        let first = history.first()?;
        if first.from.is_some() || first.to != TicketState::New {
            return None;
        }
        let mut r = Replayed { state: TicketState::New, solved_at: None, closed_at: None };
        let mut last = first.at;
        for e in &history[1..] {
            if e.from != Some(r.state) || !r.state.can_become(e.to) || e.at < last {
                return None;
            }
            apply(&mut r, e.to, e.at);
            last = e.at;
        }
        Some(r)
    }

    pub fn evidence_classes(&self) -> impl Iterator<Item = EvidenceClass> + '_ {
        self.linked_evidence.iter().map(EvidenceRef::class)
    }
}

fn apply(r: &mut Replayed, to: TicketState, at: Timestamp) {
    r.state = to;
    match to {
        TicketState::Solved => r.solved_at = Some(at),
        TicketState::Reopened => r.solved_at = None,
        TicketState::Verified => r.closed_at = Some(at),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NotificationKind {
    Opened,
    Transitioned { from: TicketState, to: TicketState },
}

/// Outbox entry for a ticket change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub seq: u64,
    pub at: Timestamp,
    pub ticket: u64,
    pub site: NodeId,
    pub recipient: ContactId,
    #[serde(flatten)]
    pub kind: NotificationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewTicket {
    pub site: NodeId,
    pub severity: Severity,
    pub summary: String,
    #[serde(default)]
    pub evidence: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketDesk {
    tickets: BTreeMap<u64, Ticket>,
    next_id: u64,
    outbox: Vec<Notification>,
}

fn party(registry: &Registry, actor: &Actor) -> Result<String> {
    match actor {
        Actor::Operator => Ok(OPERATOR.to_string()),
        Actor::Subject(dn) => registry.resolve(dn).map(|c| c.id.as_str().to_string()).ok_or_else(|| Error::UnknownIdentity(dn.clone())),
    }
}

impl TicketDesk {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: u64) -> Option<&Ticket> {
        self.tickets.get(&id)
    }

    pub fn tickets(&self) -> impl Iterator<Item = &Ticket> {
        self.tickets.values()
    }

    pub fn outbox(&self) -> &[Notification] {
        &self.outbox
    }

    /// Reinstates a ticket record and its notification, as read back from storage.
    pub fn restore(&mut self, ticket: Ticket, notification: Option<Notification>) {
        self.next_id = self.next_id.max(ticket.id);
        self.tickets.insert(ticket.id, ticket);
        if let Some(n) = notification {
            self.outbox.push(n);
        }
    }

    fn notify(&mut self, ticket: &Ticket, at: Timestamp, kind: NotificationKind) {
        let seq = self.outbox.len() as u64 + 1;
        self.outbox.push(Notification { seq, at, ticket: ticket.id, site: ticket.site.clone(), recipient: ticket.assignee.clone(), kind });
    }

    /// Opens a NEW ticket assigned to the first ADMIN contact of the site.
    pub fn open_ticket(&mut self, registry: &Registry, actor: &Actor, request: NewTicket, now: Timestamp) -> Result<Ticket> {
        let opened_by = party(registry, actor)?;
        match registry.get(&request.site) {
            Some(n) if n.kind == NodeKind::Site => {}
            _ => return Err(Error::UnknownSite(request.site)),
        }
        let assignee = registry.admins_at(&request.site).first().map(|c| c.id.clone()).ok_or_else(|| Error::NoSiteContact(request.site.clone()))?;
        self.next_id += 1;
        let ticket = Ticket {
            id: self.next_id,
            site: request.site,
            summary: request.summary,
            opened_by: opened_by.clone(),
            assignee,
            severity: request.severity,
            state: TicketState::New,
            opened_at: now,
            solved_at: None,
            closed_at: None,
            linked_evidence: request.evidence,
            history: alloc::vec![TicketEvent { at: now, actor: opened_by, from: None, to: TicketState::New, note: String::new() }],
        };
        self.notify(&ticket, now, NotificationKind::Opened);
        self.tickets.insert(ticket.id, ticket.clone());
        Ok(ticket)
    }

    /// Moves a ticket along its lifecycle. Allowed for the assignee, the
    /// opener and ADMIN contacts over the site.
    pub fn transition_ticket(&mut self, registry: &Registry, actor: &Actor, id: u64, to: TicketState, note: &str, now: Timestamp) -> Result<Ticket> {
        let who = party(registry, actor)?;
        let ticket = self.tickets.get(&id).ok_or(Error::UnknownTicket(id))?;
        let permitted = match actor {
            Actor::Operator => true,
            Actor::Subject(dn) => {
                who == ticket.assignee.as_str() || who == ticket.opened_by || registry.check_authz(dn, Action::Admin, &ticket.site)?
            }
        };
        if !permitted {
            return Err(Error::AuthzDenied);
        }
        let from = ticket.state;
        if !from.can_become(to) {
            return Err(Error::IllegalTransition { from: from.as_str().to_string(), to: to.as_str().to_string() });
        }
        if ticket.history.last().is_some_and(|e| now < e.at) {
            return Err(Error::NonMonotoneTime);
        }
        let ticket = self.tickets.get_mut(&id).expect("checked above");
        let mut r = Replayed { state: from, solved_at: ticket.solved_at, closed_at: ticket.closed_at };
        apply(&mut r, to, now);
        ticket.state = r.state;
        ticket.solved_at = r.solved_at;
        ticket.closed_at = r.closed_at;
        ticket.history.push(TicketEvent { at: now, actor: who, from: Some(from), to, note: note.to_string() });
        let ticket = ticket.clone();
        self.notify(&ticket, now, NotificationKind::Transitioned { from, to });
        Ok(ticket)
    }
}

/// Ticket proposal awaiting confirmation by an operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftTicket {
    pub site: NodeId,
    pub severity: Severity,
    pub summary: String,
    pub evidence: Vec<EvidenceRef>,
    pub class: EvidenceClass,
}

impl DraftTicket {
    pub fn into_request(self) -> NewTicket {
        NewTicket { site: self.site, severity: self.severity, summary: self.summary, evidence: self.evidence }
    }
}

/// Consecutive failed results required before suggesting a ticket.
pub const DEBOUNCE: u32 = 2;

/// Drafts for critical services DOWN on at least two consecutive results and
/// for RAISED alarms, skipping evidence classes an open ticket already covers.
pub fn suggest_tickets<'a>(
    registry: &Registry,
    health: &[ServiceHealth],
    alarms: impl IntoIterator<Item = &'a Alarm>,
    tickets: impl IntoIterator<Item = &'a Ticket>,
) -> Vec<DraftTicket> {
    let covered: BTreeSet<EvidenceClass> = tickets.into_iter().filter(|t| t.state.is_open()).flat_map(Ticket::evidence_classes).collect();
    let mut drafts: BTreeMap<EvidenceClass, DraftTicket> = BTreeMap::new();
    for h in health {
        if h.status.state != ServiceState::Down || h.consecutive_failures < DEBOUNCE {
            continue;
        }
        let Some(service) = registry.get(&h.status.service) else { continue };
        let Some(site) = service.parent.clone() else { continue };
        if !service.is_critical() {
            continue;
        }
        let evidence = EvidenceRef::ProbeResult { service: service.id.clone(), result: h.status.source_result };
        let class = evidence.class();
        if covered.contains(&class) {
            continue;
        }
        let summary = format!("{} is DOWN ({} consecutive failed probes)", service.name, h.consecutive_failures);
        drafts.entry(class.clone()).or_insert(DraftTicket { site, severity: Severity::Simple, summary, evidence: alloc::vec![evidence], class });
    }
    for alarm in alarms {
        if alarm.state != AlarmState::Raised {
            continue;
        }
        let Some(site) = registry.get(&alarm.wms).and_then(|n| n.parent.clone()) else { continue };
        let evidence = EvidenceRef::Alarm { wms: alarm.wms.clone(), metric: alarm.metric.clone(), raised_at: alarm.raised_at };
        let class = evidence.class();
        if covered.contains(&class) {
            continue;
        }
        let summary = format!("{} alarm on {}: peak {} (see {})", alarm.metric, alarm.wms, alarm.peak_value, alarm.guide_url);
        drafts.entry(class.clone()).or_insert(DraftTicket { site, severity: Severity::Simple, summary, evidence: alloc::vec![evidence], class });
    }
    drafts.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityStats {
    pub severity: Severity,
    pub count: usize,
    pub median_days: Option<f64>,
    pub p90_days: Option<u32>,
    pub target_days: u32,
    pub target_met_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionStats {
    pub window: Window,
    pub per_severity: Vec<SeverityStats>,
    pub target_met_fraction: Option<f64>,
}

/// Median of a non-empty sample; the mean of the two middle values for even sizes.
pub fn median(values: &mut [u32]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (_, &mut hi, _) = values.select_nth_unstable(n / 2);
    if n % 2 == 1 {
        return Some(f64::from(hi));
    }
    let lo = *values[..n / 2].iter().max().expect("non-empty lower half");
    Some((f64::from(lo) + f64::from(hi)) / 2.0)
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn percentile_nearest_rank(values: &mut [u32], p: u32) -> Option<u32> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let rank = (p as usize * n).div_ceil(100).max(1);
    let (_, &mut v, _) = values.select_nth_unstable(rank - 1);
    Some(v)
}

/// Business days from opening to solution for tickets solved inside `window`.
pub fn resolution_metrics<'a>(window: Window, tickets: impl IntoIterator<Item = &'a Ticket>) -> ResolutionStats {
    let mut days: BTreeMap<Severity, Vec<u32>> = BTreeMap::new();
    for t in tickets {
        let Some(solved) = t.solved_at.filter(|s| window.contains(*s)) else { continue };
        days.entry(t.severity).or_default().push(business_days_between(t.opened_at.date_naive(), solved.date_naive()));
    }
    let mut met_total = 0usize;
    let mut count_total = 0usize;
    let per_severity = [Severity::Simple, Severity::Complex]
        .into_iter()
        .map(|severity| {
            let mut v = days.remove(&severity).unwrap_or_default();
            let target = severity.target_days();
            let met = v.iter().filter(|&&d| d <= target).count();
            met_total += met;
            count_total += v.len();
            SeverityStats {
                severity,
                count: v.len(),
                median_days: median(&mut v),
                p90_days: percentile_nearest_rank(&mut v, 90),
                target_days: target,
                target_met_fraction: (!v.is_empty()).then(|| met as f64 / v.len() as f64),
            }
        })
        .collect();
    ResolutionStats { window, per_severity, target_met_fraction: (count_total > 0).then(|| met_total as f64 / count_total as f64) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::ServiceStatus;
    use crate::registry::{Contact, Privilege, RegistryNode, ServiceType, StorageTb};
    use alloc::vec;
    use chrono::NaiveTime;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn at(d: NaiveDate) -> Timestamp {
        d.and_time(NaiveTime::from_hms_opt(10, 0, 0).unwrap()).and_utc()
    }

    const ADMIN_DN: &str = "/C=RS/O=AEGIS/CN=Site Admin";
    const GOOD_DN: &str = "/C=BG/O=BG.ACAD/CN=Duty Operator";
    const OTHER_DN: &str = "/C=GR/O=HellasGrid/CN=Someone Else";

    fn registry() -> Registry {
        let mut r = Registry::new();
        let op = Actor::Operator;
        let t = at(date(2009, 1, 5));
        r.upsert_node(&op, RegistryNode::roc("see", "SEE"), t).unwrap();
        r.upsert_node(&op, RegistryNode::country("rs", "Serbia", &"see".into()), t).unwrap();
        r.upsert_node(&op, RegistryNode::country("bg", "Bulgaria", &"see".into()), t).unwrap();
        r.upsert_node(&op, RegistryNode::site("rs-1", "AEGIS01", &"rs".into(), 8, StorageTb::ZERO), t).unwrap();
        r.upsert_node(&op, RegistryNode::site("rs-2", "AEGIS02", &"rs".into(), 8, StorageTb::ZERO), t).unwrap();
        r.upsert_node(&op, RegistryNode::service("ce1", "ce.ipb.ac.rs", &"rs-1".into(), ServiceType::Ce, "ce:2119", true), t).unwrap();
        r.upsert_node(&op, RegistryNode::service("wms1", "wms.ipb.ac.rs", &"rs-1".into(), ServiceType::Wms, "wms:7443", false), t).unwrap();
        let contacts = [
            ("admin", "rs-1", Privilege::Admin, ADMIN_DN),
            ("good", "bg", Privilege::Admin, GOOD_DN),
            ("other", "rs-1", Privilege::Viewer, OTHER_DN),
        ];
        for (id, node, privilege, dn) in contacts {
            let c = Contact {
                id: ContactId::new(id),
                name: id.to_string(),
                email: format!("{id}@example.org"),
                phone: String::new(),
                node: node.into(),
                privilege,
            };
            r.upsert_contact(&op, c, t).unwrap();
            r.map_identity(&op, dn, &ContactId::new(id), t).unwrap();
        }
        r
    }

    #[test]
    fn rota_modulo() {
        let rota = ShiftRota::new(vec!["bg".into(), "gr".into(), "rs".into()], date(2008, 5, 5)).unwrap();
        assert_eq!(current_good(date(2008, 5, 5) + chrono::TimeDelta::weeks(5), &rota).unwrap(), NodeId::from("rs"));
        assert_eq!(current_good(date(2008, 5, 5), &rota).unwrap(), NodeId::from("bg"));
        assert_eq!(current_good(date(2008, 5, 11), &rota).unwrap(), NodeId::from("bg"));
        assert_eq!(current_good(date(2008, 5, 4), &rota), Err(Error::DateBeforeEpoch));
        assert!(ShiftRota::new(vec![], date(2008, 5, 5)).is_err());
        assert!(ShiftRota::new(vec!["a".into(), "a".into()], date(2008, 5, 5)).is_err());
        assert!(ShiftRota::new(vec!["a".into()], date(2008, 5, 6)).is_err());
    }

    fn request(site: &str) -> NewTicket {
        NewTicket {
            site: site.into(),
            severity: Severity::Simple,
            summary: "CE failing job submission".to_string(),
            evidence: vec![EvidenceRef::ProbeResult { service: "ce1".into(), result: Some(ResultId(7)) }],
        }
    }

    #[test]
    fn open_and_walk_lifecycle() {
        let r = registry();
        let mut desk = TicketDesk::new();
        let good = Actor::subject(GOOD_DN);
        let admin = Actor::subject(ADMIN_DN);
        let d = date(2009, 6, 8);
        let t = desk.open_ticket(&r, &good, request("rs-1"), at(d)).unwrap();
        assert_eq!((t.state, t.assignee.as_str(), t.opened_by.as_str()), (TicketState::New, "admin", "good"));
        assert_eq!(
            desk.transition_ticket(&r, &good, t.id, TicketState::Verified, "", at(d)),
            Err(Error::IllegalTransition { from: "NEW".to_string(), to: "VERIFIED".to_string() })
        );
        assert_eq!(desk.transition_ticket(&r, &Actor::subject(OTHER_DN), t.id, TicketState::Assigned, "", at(d)), Err(Error::AuthzDenied));
        desk.transition_ticket(&r, &admin, t.id, TicketState::Assigned, "", at(d)).unwrap();
        desk.transition_ticket(&r, &admin, t.id, TicketState::InProgress, "", at(d)).unwrap();
        let solved = desk.transition_ticket(&r, &admin, t.id, TicketState::Solved, "fixed", at(d + chrono::TimeDelta::days(1))).unwrap();
        assert_eq!(solved.solved_at, Some(at(date(2009, 6, 9))));
        let reopened = desk.transition_ticket(&r, &good, t.id, TicketState::Reopened, "still failing", at(date(2009, 6, 10))).unwrap();
        assert_eq!(reopened.solved_at, None);
        assert_eq!(desk.transition_ticket(&r, &good, t.id, TicketState::InProgress, "", at(date(2009, 6, 9))), Err(Error::NonMonotoneTime));
        let last = desk.get(t.id).unwrap();
        let replayed = Ticket::replay(&last.history).unwrap();
        assert_eq!((replayed.state, replayed.solved_at, replayed.closed_at), (last.state, last.solved_at, last.closed_at));
        assert_eq!(desk.outbox().len(), 5);
    }

    #[test]
    fn open_errors() {
        let r = registry();
        let mut desk = TicketDesk::new();
        let good = Actor::subject(GOOD_DN);
        let t = at(date(2009, 6, 8));
        assert_eq!(desk.open_ticket(&r, &good, request("nope"), t), Err(Error::UnknownSite("nope".into())));
        assert_eq!(desk.open_ticket(&r, &good, request("rs-2"), t), Err(Error::NoSiteContact("rs-2".into())));
        assert!(matches!(desk.open_ticket(&r, &Actor::subject("/CN=nobody"), request("rs-1"), t), Err(Error::UnknownIdentity(_))));
    }

    fn down(failures: u32) -> ServiceHealth {
        ServiceHealth {
            status: ServiceStatus { service: "ce1".into(), state: ServiceState::Down, as_of: at(date(2009, 6, 8)), source_result: Some(ResultId(3)) },
            consecutive_failures: failures,
        }
    }

    #[test]
    fn suggestions_debounce_and_dedup() {
        let r = registry();
        assert_eq!(suggest_tickets(&r, &[down(1)], [], []).len(), 0);
        let drafts = suggest_tickets(&r, &[down(2)], [], []);
        assert_eq!(drafts.len(), 1);
        assert_eq!(drafts[0].site, NodeId::from("rs-1"));

        let mut desk = TicketDesk::new();
        let t = desk.open_ticket(&r, &Actor::Operator, drafts[0].clone().into_request(), at(date(2009, 6, 8))).unwrap();
        for s in [TicketState::Assigned, TicketState::InProgress] {
            desk.transition_ticket(&r, &Actor::Operator, t.id, s, "", at(date(2009, 6, 8))).unwrap();
        }
        assert!(suggest_tickets(&r, &[down(3)], [], desk.tickets()).is_empty());
        desk.transition_ticket(&r, &Actor::Operator, t.id, TicketState::Solved, "", at(date(2009, 6, 9))).unwrap();
        assert_eq!(suggest_tickets(&r, &[down(3)], [], desk.tickets()).len(), 1);

        let alarm = Alarm {
            wms: "wms1".into(),
            metric: "input_queue_length".to_string(),
            state: AlarmState::Raised,
            raised_at: at(date(2009, 6, 8)),
            cleared_at: None,
            peak_value: 6000.0,
            guide_url: "https://wiki.example.org/q".to_string(),
        };
        let drafts = suggest_tickets(&r, &[], [&alarm], []);
        assert_eq!(drafts.len(), 1);
        assert_eq!(drafts, suggest_tickets(&r, &[], [&alarm], []));
    }

    fn solved(severity: Severity, opened: NaiveDate, solved: NaiveDate) -> Ticket {
        Ticket {
            id: 1,
            site: "rs-1".into(),
            summary: String::new(),
            opened_by: OPERATOR.to_string(),
            assignee: ContactId::new("admin"),
            severity,
            state: TicketState::Solved,
            opened_at: at(opened),
            solved_at: Some(at(solved)),
            closed_at: None,
            linked_evidence: vec![],
            history: vec![],
        }
    }

    #[test]
    fn resolution_examples() {
        let w = Window::new(at(date(2009, 6, 1)), at(date(2009, 7, 1))).unwrap();
        let tickets = [
            solved(Severity::Simple, date(2009, 6, 8), date(2009, 6, 9)),
            solved(Severity::Complex, date(2009, 6, 12), date(2009, 6, 17)),
            solved(Severity::Complex, date(2009, 6, 12), date(2009, 6, 22)),
        ];
        let s = resolution_metrics(w, &tickets);
        let simple = &s.per_severity[0];
        assert_eq!((simple.count, simple.median_days, simple.target_met_fraction), (1, Some(1.0), Some(1.0)));
        let complex = &s.per_severity[1];
        assert_eq!(complex.median_days, Some(4.5));
        assert_eq!(complex.p90_days, Some(6));
        assert_eq!(complex.target_met_fraction, Some(0.5));
        assert_eq!(s.target_met_fraction, Some(2.0 / 3.0));
        let empty = resolution_metrics(w, &[]);
        assert_eq!(empty.target_met_fraction, None);
    }
}
