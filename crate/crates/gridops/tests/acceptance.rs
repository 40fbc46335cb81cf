//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate, TimeDelta};
use common::{header_config, Server, DN_HEADER};
use gridops::cli::{self, Profile};
use gridops::fixtures::{self, fixture_dn, QuarterPlan, ROC_ID, ROC_OPERATOR};
use gridops::formats::{export_xml, import_xml};
use gridops_core::accounting::{parse_batch_log, query_usage, utilization, Dim, JobType, Metric, UsageFilter, UsageRecord, UsageTable};
use gridops_core::operations::{current_good, median, percentile_nearest_rank, ShiftRota};
use gridops_core::probe::{ProbeCatalogue, ProbeDefinition, ProbeResult, ProbeStatus, ResultStore, ServiceState};
use gridops_core::registry::{Action, Actor, Contact, ContactId, NodeId, NodeKind, Privilege, Registry, RegistryNode, ServiceType, StorageTb};
use gridops_core::sla::{build_timeline, quarterly_report, weighted_availability, ReportInputs, ScopeKind};
use gridops_core::time::{minute_of, Timestamp, Window};
use gridops_core::wms::{AlarmRule, AlarmRules, AlarmState, Collector, WmsSnapshot, INPUT_QUEUE_LENGTH, METRICS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

// ---- Table 1 ------------------------------------------------------------------

/// Country rows as published: code, CPUs, storage in TB.
const PUBLISHED: [(&str, u64, &str); 14] = [
    ("gr", 1200, "66.8"),
    ("bg", 1210, "42.3"),
    ("ro", 120, "4.0"),
    ("tr", 2380, "528.0"),
    ("hu", 8, "2.0"),
    ("al", 34, "1.3"),
    ("ba", 80, "1.1"),
    ("mk", 80, "4.1"),
    ("rs", 974, "97.0"),
    ("me", 40, "0.6"),
    ("md", 24, "6.5"),
    ("hr", 44, "0.2"),
    ("am", 424, "0.2"),
    ("ge", 16, "0.1"),
];

fn tb_milli(s: &str) -> u64 {
    let (whole, frac) = s.split_once('.').unwrap_or((s, "0"));
    whole.parse::<u64>().unwrap() * 1000 + frac.parse::<u64>().unwrap() * 10u64.pow(3 - frac.len() as u32)
}

fn table1() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli::generate_fixtures(Profile::Table1, dir.path()).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("topology.json")).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let mut suite = common::open(&dir.path().join("data"));
    suite.import_topology(serde_json::from_str(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let reg = suite.registry();
    let total = reg.resource_summary(&NodeId::from(ROC_ID)).map_err(|e| e.to_string())?;
    ensure!(total.cpu_total == 6634, "ROC CPUs {}", total.cpu_total);
    ensure!(total.storage_tb_total.milli() == 754_200, "ROC storage {} mTB", total.storage_tb_total.milli());
    for (cc, cpus, tb) in PUBLISHED {
        let t = reg.resource_summary(&NodeId::from(cc)).map_err(|e| e.to_string())?;
        ensure!(t.cpu_total == cpus, "{cc}: {} CPUs, expected {cpus}", t.cpu_total);
        ensure!(t.storage_tb_total.milli() == tb_milli(tb), "{cc}: {} mTB, expected {tb} TB", t.storage_tb_total.milli());
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("6634 CPUs, 754.2 TB, 14 country rows exact in {elapsed:?}"))
}

// ---- usage arithmetic ---------------------------------------------------------

fn usage_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut suite = common::registry_suite(dir.path());
    common::ingest_accounting(&mut suite);
    let table = |metric| suite.usage_table(&UsageFilter::default(), Dim::Vo, Dim::JobType, metric).map_err(|e| e.to_string());
    let hours = table(Metric::CpuHours)?;
    let years = table(Metric::CpuYears)?;
    ensure!(rel_close(hours.grand_total, 22_500_000.0, 1e-12), "total {} CPU hours", hours.grand_total);
    ensure!((years.grand_total - 2566.7).abs() <= 0.1, "total {} CPU years", years.grand_total);
    let project_hours: f64 = fixtures::PROJECT_VOS.iter().map(|vo| hours.row_totals.get(*vo).copied().unwrap_or(0.0)).sum();
    let project_years: f64 = fixtures::PROJECT_VOS.iter().map(|vo| years.row_totals.get(*vo).copied().unwrap_or(0.0)).sum();
    ensure!(rel_close(project_hours, 16_400_000.0, 1e-12), "project VOs {project_hours} CPU hours");
    let share = project_hours / hours.grand_total;
    ensure!((share - 0.729).abs() <= 0.005, "project share {share}");
    ensure!(((project_years - 1870.9) / 1870.9).abs() <= 0.0015, "project {project_years} CPU years");
    Ok(format!("{:.2} CPU years total, project share {:.2}%, project {:.2} CPU years", years.grand_total, share * 100.0, project_years))
}

fn utilization_figure() -> Outcome {
    let start = common::at("2008-05-01T00:00:00Z");
    let window = Window::new(start, start + TimeDelta::hours(2 * 8766)).map_err(|e| e.to_string())?;
    let u = utilization(16_400_000.0, 1050, window).map_err(|e| e.to_string())?;
    ensure!((u.value - 0.891).abs() <= 0.01 && !u.overflow, "utilization {}", u.value);
    Ok(format!("utilization {:.4}", u.value))
}

// ---- availability corpora -----------------------------------------------------

fn up(s: ProbeStatus) -> bool {
    matches!(s, ProbeStatus::Ok | ProbeStatus::Warn)
}

/// Brute force: for every minute, each critical service's newest result is
/// looked up and judged fresh or stale; the site is up when all are up.
fn minute_oracle_site(reg: &Registry, site: &NodeId, window: Window, catalogue: &ProbeCatalogue, results: &[ProbeResult]) -> f64 {
    let services: Vec<&RegistryNode> = reg.services_of(site).filter(|s| s.is_active() && s.is_critical()).collect();
    let mut series: Vec<(Vec<&ProbeResult>, i64)> = Vec::new();
    for s in &services {
        let probe = catalogue.probe_for(s).expect("probe for critical service");
        let stale = (2 * i64::from(probe.period_s)).div_euclid(60) + i64::from((2 * probe.period_s) % 60 != 0);
        let mut v: Vec<&ProbeResult> = results.iter().filter(|r| r.service == s.id && r.probe_id == probe.probe_id).collect();
        v.sort_by_key(|r| r.timestamp);
        series.push((v, stale));
    }
    let mut cursor = vec![0usize; series.len()];
    let mut up_minutes = 0i64;
    for m in window.start_minute()..window.end_minute() {
        let mut all_up = !series.is_empty();
        for (k, (v, stale)) in series.iter().enumerate() {
            while cursor[k] < v.len() && minute_of(v[cursor[k]].timestamp) <= m {
                cursor[k] += 1;
            }
            let fresh_up = cursor[k] > 0 && {
                let last = v[cursor[k] - 1];
                m - minute_of(last.timestamp) < *stale && up(last.status)
            };
            all_up &= fresh_up;
        }
        up_minutes += i64::from(all_up);
    }
    up_minutes as f64 / window.minutes() as f64
}

fn quarter(q: u32, target: f64) -> Outcome {
    let reg = fixtures::table1_registry();
    let settings = common::settings();
    let plan: QuarterPlan = fixtures::quarter_plan(&reg, q, settings.quarter_epoch, target);
    let results = fixtures::quarter_results(&reg, &plan, &settings.catalogue);

    let started = Instant::now();
    let mut store = ResultStore::new();
    for r in &results {
        store.record_result(r.clone(), &reg, common::fixture_now()).map_err(|e| e.to_string())?;
    }
    let inputs = ReportInputs { registry: &reg, results: &store, catalogue: &settings.catalogue, threshold: settings.threshold };
    let report = quarterly_report(plan.quarter, settings.quarter_epoch, inputs).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    let rows: Vec<_> = report.rows().collect();
    let infra = rows.iter().find(|f| f.kind == ScopeKind::Infrastructure).ok_or("no infrastructure row")?;
    let mut num = 0.0;
    let mut den = 0u64;
    for (site, failing) in &plan.failing {
        let got = rows.iter().find(|f| f.kind == ScopeKind::Site && &f.scope == site).ok_or(format!("no row for {site}"))?.availability;
        let oracle = minute_oracle_site(&reg, site, plan.window, &settings.catalogue, &results);
        let planned = f64::from(plan.slots - failing) / f64::from(plan.slots);
        ensure!(got == oracle, "{site}: report {got} vs minute oracle {oracle}");
        ensure!(got == planned, "{site}: report {got} vs plan {planned}");
        let cpus = reg.get(site).and_then(RegistryNode::cpu_count).unwrap_or(0);
        num += cpus as f64 * oracle;
        den += cpus;
    }
    let oracle_infra = num / den as f64;
    ensure!(rel_close(infra.availability, oracle_infra, 1e-12), "infrastructure {} vs oracle {oracle_infra}", infra.availability);
    ensure!(rel_close(infra.availability, plan.expected_availability(&reg), 1e-12), "infrastructure differs from the plan");
    ensure!((infra.availability - target).abs() <= 0.01, "infrastructure {} vs target {target}", infra.availability);
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "Q{q}: {:.4} (target {target}), {} sites equal to the minute oracle, {} results in {elapsed:.2?}",
        infra.availability,
        plan.failing.len(),
        results.len()
    ))
}

// ---- oracle equivalence -------------------------------------------------------

const INSTANCES: usize = 1000;

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6a09_e667 ^ salt)
}

fn status_of(k: u32) -> ProbeStatus {
    [ProbeStatus::Ok, ProbeStatus::Warn, ProbeStatus::Error, ProbeStatus::Timeout][k as usize % 4]
}

fn ts(sec: i64) -> Timestamp {
    Timestamp::from_timestamp(sec, 0).expect("valid instant")
}

fn oracle_state(results: &[ProbeResult], minute: i64, stale: i64) -> ServiceState {
    let last = results.iter().filter(|r| minute_of(r.timestamp) <= minute).last();
    match last {
        Some(r) if minute - minute_of(r.timestamp) < stale => match r.status {
            ProbeStatus::Ok => ServiceState::Up,
            ProbeStatus::Warn => ServiceState::Degraded,
            _ => ServiceState::Down,
        },
        _ => ServiceState::Unknown,
    }
}

fn timeline_equivalence() -> Result<(), String> {
    let mut rng = rng(1);
    let svc = NodeId::from("svc");
    for i in 0..INSTANCES {
        let period_s = rng.gen_range(30..=3600u32);
        let probe = ProbeDefinition { probe_id: "p".into(), service_type: ServiceType::Ce, period_s, timeout_s: 10, critical: true };
        let start = 1_000_000 + rng.gen_range(0..500i64);
        let window = Window::from_minutes(start, start + rng.gen_range(1..400)).map_err(|e| e.to_string())?;
        let mut results: Vec<ProbeResult> = (0..rng.gen_range(0..30))
            .map(|_| {
                let sec = (start - 150) * 60 + rng.gen_range(0..(window.minutes() + 200) * 60);
                ProbeResult::new(svc.clone(), "p", ts(sec), status_of(rng.gen()))
            })
            .collect();
        results.sort_by_key(|r| r.timestamp);
        let stale = (2 * i64::from(period_s) + 59) / 60;
        let tl = build_timeline(&svc, window, &results, &probe).map_err(|e| e.to_string())?;
        let mut avail = 0i64;
        for m in window.start_minute()..window.end_minute() {
            let expected = oracle_state(&results, m, stale);
            ensure!(tl.state_at(m) == expected, "instance {i}, minute {m}: {:?} vs {expected:?}", tl.state_at(m));
            avail += i64::from(matches!(expected, ServiceState::Up | ServiceState::Degraded));
        }
        let got = tl.available_minutes() as f64 / window.minutes() as f64;
        ensure!(rel_close(got, avail as f64 / window.minutes() as f64, 1e-9), "instance {i}: availability {got}");
    }
    Ok(())
}

fn now0() -> Timestamp {
    ts(1_200_000_000)
}

fn random_registry(rng: &mut ChaCha8Rng, max_countries: usize, max_sites: usize) -> Registry {
    let mut reg = Registry::new();
    let root = NodeId::from("roc");
    reg.upsert_node(&Actor::Operator, RegistryNode::roc("roc", "ROC"), now0()).unwrap();
    for c in 0..rng.gen_range(1..=max_countries) {
        let cid = NodeId::new(format!("c{c}"));
        reg.upsert_node(&Actor::Operator, RegistryNode::country(cid.as_str(), format!("Country {c}"), &root), now0()).unwrap();
        for s in 0..rng.gen_range(1..=max_sites) {
            let sid = format!("c{c}-s{s}");
            let site = RegistryNode::site(&sid, sid.to_uppercase(), &cid, rng.gen_range(1..3000), StorageTb::from_milli(rng.gen_range(0..100_000)));
            reg.upsert_node(&Actor::Operator, site, now0()).unwrap();
            for (k, ty) in [ServiceType::Ce, ServiceType::Se].into_iter().enumerate() {
                let svc = RegistryNode::service(format!("{sid}-{k}"), format!("{sid} {k}"), &NodeId::new(sid.clone()), ty, "host:1", true);
                reg.upsert_node(&Actor::Operator, svc, now0()).unwrap();
            }
        }
    }
    reg
}

fn sites(reg: &Registry) -> Vec<&RegistryNode> {
    reg.nodes().filter(|n| n.kind == NodeKind::Site && n.is_active()).collect()
}

fn weighted_equivalence() -> Result<(), String> {
    let mut rng = rng(2);
    let window = Window::from_minutes(0, 60).unwrap();
    for i in 0..INSTANCES {
        let reg = random_registry(&mut rng, 4, 5);
        let figures: BTreeMap<NodeId, f64> = sites(&reg).iter().map(|s| (s.id.clone(), rng.gen_range(0.0..=1.0))).collect();
        let scopes: Vec<NodeId> = reg.nodes().filter(|n| matches!(n.kind, NodeKind::Roc | NodeKind::Country)).map(|n| n.id.clone()).collect();
        for scope in scopes {
            let got = weighted_availability(&reg, &scope, window, &figures).map_err(|e| e.to_string())?;
            let mut num = 0.0;
            let mut den = 0u64;
            for s in sites(&reg) {
                if reg.ancestors_or_self(&s.id).iter().any(|a| a.id == scope) {
                    num += s.cpu_count().unwrap() as f64 * figures[&s.id];
                    den += s.cpu_count().unwrap();
                }
            }
            ensure!(got.weight == den, "instance {i}, {scope}: weight {} vs {den}", got.weight);
            ensure!(rel_close(got.availability, num / den as f64, 1e-9), "instance {i}, {scope}: {} vs {}", got.availability, num / den as f64);
        }
    }
    Ok(())
}

const VOS: [&str; 4] = ["seegrid", "meteo", "dteam", "ops"];

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<UsageRecord> {
    (0..n)
        .map(|k| {
            let country = rng.gen_range(0..3);
            let site = format!("c{country}-s{}", rng.gen_range(0..3));
            let mpi = rng.gen_bool(0.4);
            let cores = if mpi { rng.gen_range(2..64) } else { 1 };
            UsageRecord {
                job_id: format!("{k}"),
                site: NodeId::new(site),
                vo: VOS.choose(rng).unwrap().to_string(),
                country: NodeId::new(format!("c{country}")),
                end: ts(1_230_768_000 + rng.gen_range(0..365 * 86_400)),
                cores,
                core_seconds: rng.gen_range(0..400_000) * u64::from(cores),
                job_type: if mpi { JobType::Mpi } else { JobType::Serial },
            }
        })
        .collect()
}

fn label(dim: Dim, r: &UsageRecord) -> String {
    match dim {
        Dim::Vo => r.vo.clone(),
        Dim::Country => r.country.to_string(),
        Dim::Site => r.site.to_string(),
        Dim::Month => format!("{:04}-{:02}", r.end.year(), r.end.month()),
        Dim::JobType => if r.job_type == JobType::Mpi { "MPI" } else { "SERIAL" }.to_string(),
    }
}

fn metric_value(metric: Metric, rs: &[&UsageRecord]) -> f64 {
    match metric {
        Metric::JobCount => rs.len() as f64,
        Metric::CpuHours => rs.iter().map(|r| r.core_seconds as f64).sum::<f64>() / 3600.0,
        Metric::CpuYears => rs.iter().map(|r| r.core_seconds as f64).sum::<f64>() / 3600.0 / 8766.0,
    }
}

fn random_pivot(rng: &mut ChaCha8Rng) -> (Dim, Dim, Metric) {
    let mut dims = Dim::ALL.to_vec();
    dims.shuffle(rng);
    (dims[0], dims[1], *Metric::ALL.choose(rng).unwrap())
}

fn random_filter(rng: &mut ChaCha8Rng) -> UsageFilter {
    let mut f = UsageFilter::default();
    if rng.gen_bool(0.3) {
        f.vo = Some(VOS.choose(rng).unwrap().to_string());
    }
    if rng.gen_bool(0.3) {
        f.country = Some(NodeId::new(format!("c{}", rng.gen_range(0..3))));
    }
    if rng.gen_bool(0.3) {
        let a = 1_230_768_000 + rng.gen_range(0..300 * 86_400);
        f.window = Some(Window::new(ts(a), ts(a + rng.gen_range(1..120 * 86_400))).unwrap());
    }
    if rng.gen_bool(0.2) {
        f.job_type = Some(if rng.gen() { JobType::Mpi } else { JobType::Serial });
    }
    f
}

fn matches_filter(f: &UsageFilter, r: &UsageRecord) -> bool {
    f.vo.as_ref().is_none_or(|v| &r.vo == v)
        && f.country.as_ref().is_none_or(|c| &r.country == c)
        && f.site.as_ref().is_none_or(|s| &r.site == s)
        && f.window.is_none_or(|w| w.contains(r.end))
        && f.job_type.is_none_or(|j| r.job_type == j)
}

fn pivot_equivalence() -> Result<(), String> {
    let mut rng = rng(3);
    for i in 0..INSTANCES {
        let n = rng.gen_range(0..60);
        let records = random_records(&mut rng, n);
        let (rows, cols, metric) = random_pivot(&mut rng);
        let filter = random_filter(&mut rng);
        let table = query_usage(&records, &filter, rows, cols, metric).map_err(|e| e.to_string())?;
        let kept: Vec<&UsageRecord> = records.iter().filter(|r| matches_filter(&filter, r)).collect();
        let row_keys: BTreeSet<String> = kept.iter().map(|r| label(rows, r)).collect();
        let col_keys: BTreeSet<String> = kept.iter().map(|r| label(cols, r)).collect();
        let mut expected = BTreeMap::new();
        for rk in &row_keys {
            for ck in &col_keys {
                let group: Vec<&UsageRecord> = kept.iter().copied().filter(|r| &label(rows, r) == rk && &label(cols, r) == ck).collect();
                expected.insert((rk.clone(), ck.clone()), metric_value(metric, &group));
            }
        }
        let got: BTreeMap<(String, String), f64> = table.cells.iter().map(|c| ((c.row.clone(), c.col.clone()), c.value)).collect();
        ensure!(got.len() == expected.len(), "instance {i}: {} cells vs {}", got.len(), expected.len());
        for (k, v) in &expected {
            let g = got.get(k).ok_or(format!("instance {i}: missing cell {k:?}"))?;
            ensure!(rel_close(*g, *v, 1e-9), "instance {i}, cell {k:?}: {g} vs {v}");
        }
        ensure!(rel_close(table.grand_total, metric_value(metric, &kept), 1e-9), "instance {i}: grand total");
    }
    Ok(())
}

fn percentile_equivalence() -> Result<(), String> {
    let mut rng = rng(4);
    for i in 0..INSTANCES {
        let v: Vec<u32> = (0..rng.gen_range(1..60)).map(|_| rng.gen_range(0..40)).collect();
        let p = rng.gen_range(1..=100u32);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        let rank = ((p as usize * n) as f64 / 100.0).ceil().max(1.0) as usize;
        let expected_p = sorted[rank - 1];
        let expected_median = if n % 2 == 1 { f64::from(sorted[n / 2]) } else { (f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2])) / 2.0 };
        ensure!(percentile_nearest_rank(&mut v.clone(), p) == Some(expected_p), "instance {i}: p{p}");
        let m = median(&mut v.clone()).ok_or("no median")?;
        ensure!(rel_close(m, expected_median, 1e-9), "instance {i}: median {m} vs {expected_median}");
    }
    Ok(())
}

fn oracle_suite() -> Outcome {
    timeline_equivalence().map_err(|e| format!("timeline: {e}"))?;
    weighted_equivalence().map_err(|e| format!("weighted mean: {e}"))?;
    pivot_equivalence().map_err(|e| format!("pivot: {e}"))?;
    percentile_equivalence().map_err(|e| format!("percentiles: {e}"))?;
    Ok(format!("{INSTANCES} instances each: timeline, weighted mean, pivot, percentiles"))
}

// ---- properties ---------------------------------------------------------------

const CASES: usize = 200;

fn prop_registry_additivity() -> Result<(), String> {
    let mut rng = rng(10);
    for i in 0..CASES {
        let reg = random_registry(&mut rng, 5, 6);
        let root = reg.resource_summary(&NodeId::from("roc")).unwrap();
        let mut cpu = 0;
        let mut milli = 0;
        let mut count = 0;
        for c in reg.children(&NodeId::from("roc")) {
            let t = reg.resource_summary(&c.id).unwrap();
            let by_site: u64 = reg.children(&c.id).map(|s| s.cpu_count().unwrap()).sum();
            ensure!(t.cpu_total == by_site, "case {i}: country {} not additive", c.id);
            cpu += t.cpu_total;
            milli += t.storage_tb_total.milli();
            count += t.site_count;
        }
        ensure!((root.cpu_total, root.storage_tb_total.milli(), root.site_count) == (cpu, milli, count), "case {i}: root not additive");
    }
    Ok(())
}

fn prop_authz_monotone() -> Result<(), String> {
    let mut rng = rng(11);
    for i in 0..CASES {
        let mut reg = random_registry(&mut rng, 3, 4);
        let nodes: Vec<NodeId> = reg.nodes().map(|n| n.id.clone()).collect();
        let at = nodes.choose(&mut rng).unwrap().clone();
        let privilege = if rng.gen_bool(0.7) { Privilege::Admin } else { Privilege::Viewer };
        let contact =
            Contact { id: ContactId::new("c"), name: "C".into(), email: "c@example.org".into(), phone: String::new(), node: at.clone(), privilege };
        reg.upsert_contact(&Actor::Operator, contact, now0()).unwrap();
        reg.map_identity(&Actor::Operator, "CN=c", &ContactId::new("c"), now0()).unwrap();
        for n in &nodes {
            let edit = reg.check_authz("CN=c", Action::Edit, n).unwrap();
            ensure!(reg.check_authz("CN=c", Action::View, n).unwrap(), "case {i}: view denied at {n}");
            if edit {
                for d in reg.subtree(n) {
                    ensure!(reg.check_authz("CN=c", Action::Edit, &d.id).unwrap(), "case {i}: edit at {n} but not at {}", d.id);
                }
            }
            let inside = reg.ancestors_or_self(n).iter().any(|a| a.id == at);
            ensure!(edit == (inside && privilege == Privilege::Admin), "case {i}: edit at {n} is {edit}");
        }
    }
    Ok(())
}

fn random_results(rng: &mut ChaCha8Rng, reg: &Registry, n: usize) -> Vec<ProbeResult> {
    let services: Vec<&RegistryNode> = reg.nodes().filter(|n| n.kind == NodeKind::Service).collect();
    (0..n)
        .map(|_| {
            let s = services.choose(rng).unwrap();
            let probe = if s.service_type() == Some(ServiceType::Ce) { "ce-job-submit" } else { "se-put-get" };
            ProbeResult::new(s.id.clone(), probe, ts(1_100_000_000 + rng.gen_range(0..50) * 60), status_of(rng.gen()))
        })
        .collect()
}

fn prop_probe_idempotent_append_only() -> Result<(), String> {
    let mut rng = rng(12);
    for i in 0..CASES {
        let reg = random_registry(&mut rng, 2, 3);
        let (n1, n2) = (rng.gen_range(0..40), rng.gen_range(0..40));
        let first = random_results(&mut rng, &reg, n1);
        let second = random_results(&mut rng, &reg, n2);
        let mut store = ResultStore::new();
        for r in &first {
            store.record_result(r.clone(), &reg, now0()).unwrap();
        }
        let before: Vec<ProbeResult> = store.iter().map(|(_, r)| r.clone()).collect();
        for r in &first {
            store.record_result(r.clone(), &reg, now0()).unwrap();
        }
        let replayed: Vec<ProbeResult> = store.iter().map(|(_, r)| r.clone()).collect();
        ensure!(before == replayed, "case {i}: replay changed the store");
        for r in &second {
            store.record_result(r.clone(), &reg, now0()).unwrap();
        }
        let after: Vec<ProbeResult> = store.iter().map(|(_, r)| r.clone()).collect();
        ensure!(after.starts_with(&before), "case {i}: earlier results were altered");
        ensure!(first.iter().chain(&second).all(|r| store.contains(r)), "case {i}: result lost");
    }
    Ok(())
}

fn wms_registry() -> Registry {
    let mut reg = random_registry(&mut rng(13), 1, 1);
    let site = sites(&reg)[0].id.clone();
    reg.upsert_node(&Actor::Operator, RegistryNode::service("wms-1", "WMS 1", &site, ServiceType::Wms, "wms:7443", false), now0()).unwrap();
    reg
}

fn snapshot(min: i64, value: f64) -> WmsSnapshot {
    WmsSnapshot {
        wms: NodeId::from("wms-1"),
        timestamp: ts(1_100_000_000 + min * 60),
        metrics: METRICS.iter().map(|m| (m.to_string(), if *m == INPUT_QUEUE_LENGTH { value } else { 0.0 })).collect(),
        agent_version: "1".into(),
    }
}

fn prop_alarms() -> Result<(), String> {
    let reg = wms_registry();
    let mut rng = rng(14);
    for i in 0..CASES {
        let clear = rng.gen_range(0.0..500.0);
        let raise = clear + rng.gen_range(0.0..500.0);
        let rules =
            AlarmRules::new(vec![AlarmRule { metric: "input_queue_length".into(), raise_above: raise, clear_below: clear, guide_url: "u".into() }])
                .map_err(|e| e.to_string())?;
        let mut c = Collector::new();
        let mut expect = AlarmState::Cleared;
        let mut raised = false;
        for m in 0..rng.gen_range(1..80) {
            let v = rng.gen_range(0.0..1000.0);
            let out = c.ingest_snapshot(snapshot(m, v), &rules, &reg).map_err(|e| e.to_string())?;
            let in_band = v >= clear && v <= raise;
            if in_band || (!raised && v <= raise) || (raised && v >= clear) {
                ensure!(out.is_empty(), "case {i}: transition at {v} inside the band [{clear}, {raise}] (raised {raised})");
            }
            for t in out {
                expect = if expect == AlarmState::Cleared { AlarmState::Raised } else { AlarmState::Cleared };
                ensure!(t.state == expect, "case {i}: {:?} does not alternate", t.state);
                raised = t.state == AlarmState::Raised;
            }
        }
    }
    Ok(())
}

fn prop_rotation_fair() -> Result<(), String> {
    let mut rng = rng(15);
    let monday = NaiveDate::from_ymd_opt(2008, 5, 5).unwrap();
    for i in 0..CASES {
        let n = rng.gen_range(1..=14);
        let countries: Vec<NodeId> = (0..n).map(|k| NodeId::new(format!("c{k}"))).collect();
        let rota = ShiftRota::new(countries.clone(), monday).map_err(|e| e.to_string())?;
        let first = monday + TimeDelta::weeks(rng.gen_range(0..300)) + TimeDelta::days(rng.gen_range(0..7));
        let mut seen: BTreeMap<NodeId, usize> = BTreeMap::new();
        for w in 0..n as i64 {
            *seen.entry(current_good(first + TimeDelta::weeks(w), &rota).map_err(|e| e.to_string())?).or_default() += 1;
        }
        ensure!(seen.len() == n && seen.values().all(|&k| k == 1), "case {i}: {seen:?}");
    }
    Ok(())
}

fn prop_accounting_conservation_and_xml() -> Result<(), String> {
    let mut rng = rng(16);
    for i in 0..CASES {
        let n = rng.gen_range(0..80);
        let records = random_records(&mut rng, n);
        let filter = random_filter(&mut rng);
        for metric in Metric::ALL {
            let mut totals = Vec::new();
            for rows in Dim::ALL {
                for cols in Dim::ALL.into_iter().filter(|c| *c != rows) {
                    let t: UsageTable = query_usage(&records, &filter, rows, cols, metric).map_err(|e| e.to_string())?;
                    let by_rows: f64 = t.row_totals.values().sum();
                    ensure!(rel_close(by_rows, t.grand_total, 1e-9), "case {i}: row totals {by_rows} vs {}", t.grand_total);
                    totals.push(t.grand_total);
                    let back = import_xml(&export_xml(&t)).map_err(|e| e.to_string())?;
                    ensure!(back == t.quantized(), "case {i}: XML round trip differs for {rows:?}x{cols:?}");
                }
            }
            ensure!(totals.iter().all(|t| rel_close(*t, totals[0], 1e-9)), "case {i}: grand totals differ across pivots");
        }
    }
    Ok(())
}

fn property_suite() -> Outcome {
    let props: [(&str, fn() -> Result<(), String>); 6] = [
        ("registry additivity", prop_registry_additivity),
        ("authz monotonicity", prop_authz_monotone),
        ("probe idempotency and append-only store", prop_probe_idempotent_append_only),
        ("alarm alternation and hysteresis silence", prop_alarms),
        ("rotation fairness", prop_rotation_fair),
        ("accounting conservation and XML round trip", prop_accounting_conservation_and_xml),
    ];
    for (name, p) in props {
        p().map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} properties, {CASES} cases each", props.len()))
}

// ---- parser robustness --------------------------------------------------------

const NOISE: &[char] = &[';', '=', ':', '/', '+', ' ', 'E', 'Q', '0', '9', '-', '\t', '\r', 'é', '\u{0}', '界'];

fn mutate(rng: &mut ChaCha8Rng, line: &str) -> String {
    let mut chars: Vec<char> = line.chars().collect();
    for _ in 0..rng.gen_range(1..6) {
        let len = chars.len();
        match rng.gen_range(0..6) {
            0 if len > 0 => {
                chars.remove(rng.gen_range(0..len));
            }
            1 => chars.insert(rng.gen_range(0..=len), *NOISE.choose(rng).unwrap()),
            2 if len > 0 => chars.truncate(rng.gen_range(0..len)),
            3 if len > 0 => {
                let k = rng.gen_range(0..len);
                chars[k] = char::from_digit(rng.gen_range(0..10), 10).unwrap();
            }
            4 if len > 1 => {
                let (a, b) = (rng.gen_range(0..len), rng.gen_range(0..len));
                chars.swap(a, b);
            }
            _ => {
                let k = rng.gen_range(0..=len);
                let junk: String = (0..rng.gen_range(1..12)).map(|_| char::from(rng.gen_range(b'0'..=b'z'))).collect();
                chars.splice(k..k, junk.chars());
            }
        }
    }
    chars.into_iter().filter(|c| *c != '\n').collect()
}

fn parser_fuzz() -> Outcome {
    let logs = fixtures::accounting_logs(&fixtures::table1_registry());
    let seed_lines: Vec<&str> = logs.values().flat_map(|l| l.lines()).take(5000).collect();
    let mut rng = rng(20);
    let lines: Vec<String> = (0..10_000)
        .map(|_| {
            let seed = *seed_lines.choose(&mut rng).unwrap();
            mutate(&mut rng, seed)
        })
        .collect();
    let site = NodeId::from("gr-01");
    let is_e = |l: &str| l.splitn(4, ';').nth(1) == Some("E");
    let e_lines = lines.iter().filter(|l| is_e(l)).count();
    let text = lines.join("\n");
    let (jobs, errors) = catch_unwind(|| parse_batch_log(&site, &text)).map_err(|_| "parser panicked on the batch")?;
    ensure!(jobs.len() + errors.len() >= e_lines, "{} records + {} errors < {e_lines} E lines", jobs.len(), errors.len());
    for (k, l) in lines.iter().enumerate() {
        let (j, e) = catch_unwind(|| parse_batch_log(&site, l)).map_err(|_| format!("parser panicked on line {k}: {l:?}"))?;
        ensure!(j.len() + e.len() >= usize::from(is_e(l)), "line {k} vanished: {l:?}");
    }
    Ok(format!("10000 mutated lines: {} records, {} errors, {e_lines} E lines", jobs.len(), errors.len()))
}

// ---- restart ------------------------------------------------------------------

const RESTART_PATHS: [&str; 6] = [
    "/api/v1/reports/quarter/5",
    "/api/v1/reports/quarter/5?format=csv",
    "/api/v1/accounting/query?metric=CPU_YEARS",
    "/api/v1/alarms",
    "/api/v1/tickets",
    "/api/v1/topology",
];

async fn snapshot_bodies(srv: &Server, client: &reqwest::Client) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for p in RESTART_PATHS {
        let resp = client.get(srv.url(p)).send().await.map_err(|e| e.to_string())?;
        ensure!(resp.status().is_success(), "{p}: {}", resp.status());
        out.push(resp.text().await.map_err(|e| e.to_string())?);
    }
    Ok(out)
}

async fn restart_flow() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let reg = fixtures::table1_registry();
    let settings = common::settings();
    let plan = fixtures::quarter_plan(&reg, 5, settings.quarter_epoch, fixtures::Q5_TARGET);
    let results = fixtures::quarter_results(&reg, &plan, &settings.catalogue);
    let body: String = results.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    let wms: String = fixtures::wms_snapshots(&reg, fixtures::wms_day()).iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect();

    let srv = Server::start(header_config(), common::registry_suite(&data)).await;
    let client = reqwest::Client::new();
    let dn = fixture_dn(ROC_OPERATOR);
    let post = |path: String, body: String| client.post(srv.url(&path)).header(DN_HEADER, dn.clone()).body(body).send();
    let r = post("/api/v1/results".into(), body).await.map_err(|e| e.to_string())?;
    ensure!(r.status().is_success(), "results: {}", r.status());
    for (site, log) in fixtures::accounting_logs(&reg) {
        let r = post(format!("/api/v1/accounting/logs?site={site}"), log).await.map_err(|e| e.to_string())?;
        ensure!(r.status().is_success(), "accounting {site}: {}", r.status());
    }
    let r = post("/api/v1/wms/snapshots".into(), wms).await.map_err(|e| e.to_string())?;
    ensure!(r.status().is_success(), "wms: {}", r.status());
    let ticket = serde_json::json!({ "site": "tr-01", "severity": "COMPLEX", "summary": "restart check" }).to_string();
    let r = post("/api/v1/tickets".into(), ticket).await.map_err(|e| e.to_string())?;
    ensure!(r.status().is_success(), "ticket: {}", r.status());
    let before = snapshot_bodies(&srv, &client).await?;
    srv.stop().await;

    let suite = common::open(&data);
    let audit = suite.audit().len();
    let srv = Server::start(header_config(), suite).await;
    let after = snapshot_bodies(&srv, &client).await?;
    srv.stop().await;
    for ((p, a), b) in RESTART_PATHS.iter().zip(&before).zip(&after) {
        ensure!(a == b, "{p} differs after restart");
    }
    ensure!(common::open(&data).audit().len() == audit, "audit changed without mutations");
    let bytes: usize = before.iter().map(String::len).sum();
    Ok(format!("{} endpoints, {bytes} bytes identical across restart", RESTART_PATHS.len()))
}

fn restart() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(restart_flow())
}

// ---- runner -------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Table-1 reproduction", table1),
        ("Usage arithmetic", usage_arithmetic),
        ("Utilization", utilization_figure),
        ("Availability fixture Q5", || quarter(5, fixtures::Q5_TARGET)),
        ("Availability fixture Q8", || quarter(8, fixtures::Q8_TARGET)),
        ("Oracle equivalence suite", oracle_suite),
        ("Property suites", property_suite),
        ("Parser robustness", parser_fuzz),
        ("End-to-end restart", restart),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if filter.as_ref().is_some_and(|p| !name.to_lowercase().contains(&p.to_lowercase())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
