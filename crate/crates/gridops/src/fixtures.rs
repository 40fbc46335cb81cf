//! Deterministic fixture corpora: the regional registry, quarter-scale probe
//! results with an engineered availability, batch logs with known totals,
//! WMS metric streams, alarm rules and the duty rota.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, TimeDelta};
use gridops_core::operations::ShiftRota;
use gridops_core::probe::{ProbeCatalogue, ProbeResult, ProbeStatus};
use gridops_core::registry::{
    normalize_dn, Contact, ContactId, NodeId, NodeKind, Privilege, Registry, RegistryNode, ServiceType, StorageTb, TopologySnapshot, ATTR_MPI,
};
use gridops_core::sla::QuarterId;
use gridops_core::time::{Timestamp, Window};
use gridops_core::wms::{AlarmRule, WmsSnapshot, DAEMONS_DOWN_COUNT, DISK_USED_PCT, INPUT_QUEUE_LENGTH, JOBS_WAITING, LOAD_1MIN, METRICS};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::suite::{default_rota_epoch, ContactsFile, IdentityMapping};

pub const ROC_ID: &str = "see-roc";

/// Per-country capacity: id, name, CPUs, storage in thousandths of a TB.
pub const TABLE1: [(&str, &str, u64, u64); 14] = [
    ("gr", "Greece", 1200, 66_800),
    ("bg", "Bulgaria", 1210, 42_300),
    ("ro", "Romania", 120, 4_000),
    ("tr", "Turkey", 2380, 528_000),
    ("hu", "Hungary", 8, 2_000),
    ("al", "Albania", 34, 1_300),
    ("ba", "Bosnia-Herzegovina", 80, 1_100),
    ("mk", "FYR of Macedonia", 80, 4_100),
    ("rs", "Serbia", 974, 97_000),
    ("me", "Montenegro", 40, 600),
    ("md", "Moldova", 24, 6_500),
    ("hr", "Croatia", 44, 200),
    ("am", "Armenia", 424, 200),
    ("ge", "Georgia", 16, 100),
];

pub const TABLE1_TOTAL_CPUS: u64 = 6634;
pub const TABLE1_TOTAL_STORAGE_MILLI: u64 = 754_200;

/// Countries hosting a WMS instance.
const WMS_COUNTRIES: [&str; 4] = ["gr", "bg", "tr", "rs"];

pub const PROJECT_VOS: [&str; 4] = ["seegrid", "meteo", "seismo", "env"];
const PROJECT_SHARES_PCT: [u64; 4] = [40, 25, 20, 15];
pub const OTHER_VOS: [&str; 3] = ["dteam", "ops", "biomed"];
const OTHER_SHARES_PCT: [u64; 3] = [50, 30, 20];

/// 22.5 million CPU hours in core-seconds.
pub const USAGE_TOTAL_CORE_S: u64 = 81_000_000_000;
/// 16.4 million CPU hours in core-seconds.
pub const USAGE_PROJECT_CORE_S: u64 = 59_040_000_000;

pub const Q5_TARGET: f64 = 0.78;
pub const Q8_TARGET: f64 = 0.89;
pub const SLOT_MIN: i64 = 30;

const SEED: u64 = 0x5EE6_81D0;

pub fn fixture_time() -> Timestamp {
    DateTime::from_timestamp(1_209_600_000, 0).expect("valid time")
}

pub fn sites_in(cpus: u64) -> usize {
    (1 + cpus / 600).min(4) as usize
}

/// Splits `total` into `n` parts differing by at most one, larger parts first.
fn split(total: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    (0..n64).map(|i| total / n64 + u64::from(i < total % n64)).collect()
}

pub fn site_id(country: &str, k: usize) -> String {
    format!("{country}-{:02}", k + 1)
}

pub fn fixture_dn(contact: &str) -> String {
    normalize_dn(&format!("/DC=org/DC=example/O=Grid/OU=Fixtures/CN={contact}"))
}

pub const ROC_OPERATOR: &str = "roc-operator";
pub const ROC_VIEWER: &str = "roc-viewer";

pub fn site_admin(site: &str) -> String {
    format!("admin-{site}")
}

pub fn table1_topology() -> TopologySnapshot {
    let roc = NodeId::new(ROC_ID);
    let mut nodes = vec![RegistryNode::roc(ROC_ID, "South East Europe ROC")];
    for (cc, name, cpus, storage) in TABLE1 {
        let cid = NodeId::new(cc);
        nodes.push(RegistryNode::country(cc, name, &roc));
        let n = sites_in(cpus);
        for (k, (c, s)) in split(cpus, n).into_iter().zip(split(storage, n)).enumerate() {
            let sid = site_id(cc, k);
            let site_node = NodeId::new(sid.clone());
            let mut site = RegistryNode::site(sid.clone(), sid.to_uppercase(), &cid, c, StorageTb::from_milli(s));
            if k == 0 {
                site = site.with_attr(ATTR_MPI, "true");
            }
            nodes.push(site);
            let host = |svc: &str| format!("{svc}.{sid}.example.org");
            for (suffix, ty, port) in [("ce", ServiceType::Ce, 2119), ("se", ServiceType::Se, 8443), ("bdii", ServiceType::SBdii, 2170)] {
                nodes.push(RegistryNode::service(
                    format!("{sid}-{suffix}"),
                    format!("{} {}", sid.to_uppercase(), ty.as_str()),
                    &site_node,
                    ty,
                    format!("{}:{port}", host(suffix)),
                    true,
                ));
            }
            if k == 0 && WMS_COUNTRIES.contains(&cc) {
                nodes.push(RegistryNode::service(
                    format!("{sid}-wms"),
                    format!("{} WMS", sid.to_uppercase()),
                    &site_node,
                    ServiceType::Wms,
                    format!("{}:7443", host("wms")),
                    false,
                ));
            }
        }
    }
    TopologySnapshot { version: 0, generated_at: fixture_time(), nodes }
}

fn contact(id: &str, name: String, node: &str, privilege: Privilege) -> Contact {
    Contact { id: ContactId::new(id), name, email: format!("{id}@example.org"), phone: String::new(), node: NodeId::new(node), privilege }
}

pub fn table1_contacts() -> ContactsFile {
    let mut contacts = vec![
        contact(ROC_OPERATOR, "ROC Operator".to_string(), ROC_ID, Privilege::Admin),
        contact(ROC_VIEWER, "ROC Viewer".to_string(), ROC_ID, Privilege::Viewer),
    ];
    for (cc, name, cpus, _) in TABLE1 {
        contacts.push(contact(&format!("gim-{cc}"), format!("{name} GIM"), cc, Privilege::Admin));
        for k in 0..sites_in(cpus) {
            let sid = site_id(cc, k);
            contacts.push(contact(&site_admin(&sid), format!("{} administrator", sid.to_uppercase()), &sid, Privilege::Admin));
        }
    }
    let identities = contacts.iter().map(|c| IdentityMapping { subject_dn: fixture_dn(c.id.as_str()), contact: c.id.clone() }).collect();
    ContactsFile { contacts, identities }
}

/// The regional registry with contacts and certificate mappings.
pub fn table1_registry() -> Registry {
    let mut r = Registry::new();
    let at = fixture_time();
    r.import_topology(&table1_topology(), at).expect("fixture topology is valid");
    let op = gridops_core::registry::Actor::Operator;
    let file = table1_contacts();
    for c in file.contacts {
        r.upsert_contact(&op, c, at).expect("fixture contact is valid");
    }
    for m in file.identities {
        r.map_identity(&op, &m.subject_dn, &m.contact, at).expect("fixture identity is valid");
    }
    r
}

pub fn table1_rota() -> ShiftRota {
    ShiftRota::new(TABLE1.iter().map(|c| NodeId::new(c.0)).collect(), default_rota_epoch()).expect("fixture rota is valid")
}

pub fn alarm_rules() -> Vec<AlarmRule> {
    let rule = |metric: &str, raise_above: f64, clear_below: f64| AlarmRule {
        metric: metric.to_string(),
        raise_above,
        clear_below,
        guide_url: format!("https://wiki.example.org/wms/{metric}"),
    };
    vec![
        rule(INPUT_QUEUE_LENGTH, 500.0, 300.0),
        rule(JOBS_WAITING, 1000.0, 600.0),
        rule(LOAD_1MIN, 20.0, 10.0),
        rule(DISK_USED_PCT, 90.0, 80.0),
        rule(DAEMONS_DOWN_COUNT, 0.5, 0.5),
    ]
}

// ---- availability corpora ---------------------------------------------------

/// Failing 30-minute slots per site for one quarter.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarterPlan {
    pub quarter: QuarterId,
    pub window: Window,
    pub target: f64,
    pub slots: u32,
    pub failing: BTreeMap<NodeId, u32>,
}

impl QuarterPlan {
    /// CPU-weighted mean of `(slots - failing) / slots` over the sites.
    pub fn expected_availability(&self, registry: &Registry) -> f64 {
        let mut num = 0.0;
        let mut den = 0u64;
        for (site, f) in &self.failing {
            let cpus = registry.get(site).and_then(RegistryNode::cpu_count).unwrap_or(0);
            num += cpus as f64 * f64::from(self.slots - f) / f64::from(self.slots);
            den += cpus;
        }
        num / den as f64
    }
}

fn active_sites(registry: &Registry) -> Vec<&RegistryNode> {
    registry.nodes().filter(|n| n.kind == NodeKind::Site && n.is_active()).collect()
}

/// Per-site failure counts around the target with CPU-weighted mean deviation zero.
pub fn quarter_plan(registry: &Registry, quarter: u32, epoch: NaiveDate, target: f64) -> QuarterPlan {
    let quarter = QuarterId::new(quarter).expect("positive quarter");
    let window = quarter.window(epoch).expect("quarter after epoch");
    let slots = (window.minutes() / SLOT_MIN) as u32;
    let base = (1.0 - target) * f64::from(slots);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ u64::from(quarter.index()));
    let sites = active_sites(registry);
    let raw: Vec<(u64, f64)> = sites.iter().map(|s| (s.cpu_count().unwrap_or(0), rng.gen_range(-0.35..0.35) * base)).collect();
    let total: u64 = raw.iter().map(|r| r.0).sum();
    let mean = raw.iter().map(|&(w, d)| w as f64 * d).sum::<f64>() / total as f64;
    let failing = sites
        .iter()
        .zip(raw)
        .map(|(s, (_, d))| {
            let f = (base + d - mean).round().clamp(0.0, f64::from(slots));
            (s.id.clone(), f as u32)
        })
        .collect();
    QuarterPlan { quarter, window, target, slots, failing }
}

/// One result per critical service per slot; in a failing slot at least one
/// critical service of the site reports ERROR or TIMEOUT.
pub fn quarter_results(registry: &Registry, plan: &QuarterPlan, catalogue: &ProbeCatalogue) -> Vec<ProbeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED.wrapping_mul(31) ^ u64::from(plan.quarter.index()));
    let mut out = Vec::new();
    for (site, &f) in &plan.failing {
        let services: Vec<(&NodeId, String)> = gridops_core::sla::critical_services(registry, site)
            .into_iter()
            .filter_map(|s| catalogue.probe_for(s).map(|p| (&s.id, p.probe_id.clone())))
            .collect();
        if services.is_empty() {
            continue;
        }
        let mut failing = vec![false; plan.slots as usize];
        for k in sample(&mut rng, plan.slots as usize, f as usize) {
            failing[k] = true;
        }
        for (k, &fails) in failing.iter().enumerate() {
            let slot_start = plan.window.start() + TimeDelta::minutes(k as i64 * SLOT_MIN);
            let culprit = rng.gen_range(0..services.len());
            let second = fails && rng.gen_bool(0.2);
            for (i, (svc, probe)) in services.iter().enumerate() {
                let ts = slot_start + TimeDelta::seconds(rng.gen_range(0..60));
                let status = if fails && (i == culprit || second) {
                    if rng.gen_bool(0.8) {
                        ProbeStatus::Error
                    } else {
                        ProbeStatus::Timeout
                    }
                } else if rng.gen_bool(0.02) {
                    ProbeStatus::Warn
                } else {
                    ProbeStatus::Ok
                };
                out.push(ProbeResult::new((*svc).clone(), probe.clone(), ts, status));
            }
        }
    }
    out.sort_by(|a, b| (a.timestamp, &a.service).cmp(&(b.timestamp, &b.service)));
    out
}

// ---- accounting corpus ------------------------------------------------------

pub fn accounting_window() -> Window {
    let start = NaiveDate::from_ymd_opt(2008, 5, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time").and_utc();
    Window::new(start, start + TimeDelta::days(730)).expect("non-empty window")
}

const MAX_WALL_S: u64 = 168 * 3600;

fn hms(s: u64) -> String {
    format!("{:02}:{:02}:{:02}", s / 3600, s % 3600 / 60, s % 60)
}

/// Per-VO core-second budgets: exact shares of the project and other totals.
pub fn vo_budgets() -> Vec<(&'static str, u64)> {
    let project = PROJECT_VOS.iter().zip(PROJECT_SHARES_PCT).map(|(v, p)| (*v, USAGE_PROJECT_CORE_S / 100 * p));
    let other_total = USAGE_TOTAL_CORE_S - USAGE_PROJECT_CORE_S;
    let other = OTHER_VOS.iter().zip(OTHER_SHARES_PCT).map(move |(v, p)| (*v, other_total / 100 * p));
    project.chain(other).collect()
}

/// Batch logs per site whose corrected usage sums exactly to the VO budgets.
pub fn accounting_logs(registry: &Registry) -> BTreeMap<NodeId, String> {
    let sites = active_sites(registry);
    let total_cpus: u64 = sites.iter().map(|s| s.cpu_count().unwrap_or(0)).sum();
    let window = accounting_window();
    let span = (window.end() - window.start()).num_seconds() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xACC0);
    let mut logs = BTreeMap::new();
    for (si, site) in sites.iter().enumerate() {
        let mut jobs: Vec<(Timestamp, String)> = Vec::new();
        let mut next_id = 1u64;
        for (vo, budget) in vo_budgets() {
            // Proportional split; the first site absorbs the rounding remainder.
            let share = |s: &RegistryNode| budget as u128 * u128::from(s.cpu_count().unwrap_or(0)) / u128::from(total_cpus);
            let mut remaining = share(site) as u64;
            if si == 0 {
                let assigned: u128 = sites.iter().map(|s| share(s)).sum();
                remaining += (budget as u128 - assigned) as u64;
            }
            while remaining > 0 {
                let wall = rng.gen_range(3600..=MAX_WALL_S);
                let cores = rng.gen_range(2u64..=64);
                let (wall, cores) = if rng.gen_bool(0.7) && wall * cores <= remaining { (wall, cores) } else { (wall.min(remaining), 1) };
                remaining -= wall * cores;
                let cput = if cores == 1 { wall / 2 + rng.gen_range(0..=wall / 2) } else { wall - rng.gen_range(0..=wall / 10) };
                let end = window.start() + TimeDelta::seconds(rng.gen_range(wall.min(span - 1)..span) as i64);
                let start = end - TimeDelta::seconds(wall as i64);
                let qtime = start - TimeDelta::seconds(rng.gen_range(0..3600));
                let slots: Vec<String> = (0..cores).map(|c| format!("wn{:03}/{}", c / 8, c % 8)).collect();
                let id = format!("{next_id}.ce.{}.example.org", site.id);
                next_id += 1;
                let mut line = String::new();
                let date = end.format("%m/%d/%Y %H:%M:%S");
                if next_id % 10 == 0 {
                    writeln!(line, "{};Q;{id};queue={vo}", qtime.format("%m/%d/%Y %H:%M:%S")).expect("string write");
                }
                write!(
                    line,
                    "{date};E;{id};user={vo}{:03} group={vo} queue={vo} qtime={} start={} end={} exec_host={} resources_used.walltime={} resources_used.cput={}",
                    rng.gen_range(1..50),
                    qtime.timestamp(),
                    start.timestamp(),
                    end.timestamp(),
                    slots.join("+"),
                    hms(wall),
                    hms(cput),
                )
                .expect("string write");
                jobs.push((end, line));
            }
        }
        jobs.sort();
        let mut text = String::new();
        for (_, line) in jobs {
            text.push_str(&line);
            text.push('\n');
        }
        logs.insert(site.id.clone(), text);
    }
    logs
}

// ---- WMS corpus -------------------------------------------------------------

/// One day of 10-minute snapshots per WMS; the first instance spikes its
/// input queue twice and is still alarmed at the end.
pub fn wms_snapshots(registry: &Registry, day: NaiveDate) -> Vec<WmsSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x3535);
    let start = day.and_hms_opt(0, 0, 0).expect("valid time").and_utc();
    let wms: Vec<&RegistryNode> = registry.nodes().filter(|n| n.service_type() == Some(ServiceType::Wms)).collect();
    let mut out = Vec::new();
    for (i, node) in wms.iter().enumerate() {
        for k in 0..144i64 {
            let spike = i == 0 && ((30..50).contains(&k) || k >= 130);
            let queue = if spike { rng.gen_range(550.0..900.0) } else { rng.gen_range(10.0..250.0) };
            let metrics: BTreeMap<String, f64> = METRICS
                .iter()
                .map(|m| {
                    let v: f64 = match *m {
                        INPUT_QUEUE_LENGTH => queue,
                        JOBS_WAITING => rng.gen_range(0.0..500.0),
                        LOAD_1MIN => rng.gen_range(0.5..8.0),
                        DISK_USED_PCT => rng.gen_range(40.0..70.0),
                        _ => 0.0,
                    };
                    (m.to_string(), (v * 100.0).round() / 100.0)
                })
                .collect();
            out.push(WmsSnapshot { wms: node.id.clone(), timestamp: start + TimeDelta::minutes(k * 10), metrics, agent_version: "1.0".to_string() });
        }
    }
    out
}

pub fn wms_day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 4, 20).expect("valid date")
}
