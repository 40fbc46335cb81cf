//! Batch-log parsing, usage normalization and pivoted usage tables.
//!
//! Usage is carried as whole core-seconds so that every aggregation is exact;
//! hours and years are derived only when a table is rendered.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{NodeId, NodeKind, Registry};
use crate::time::{Timestamp, Window};

pub const HOURS_PER_CPU_YEAR: u64 = 8766;
pub const SECONDS_PER_HOUR: u64 = 3600;

pub fn cpu_years(cpu_hours: f64) -> f64 {
    cpu_hours / HOURS_PER_CPU_YEAR as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobType {
    Serial,
    Mpi,
}

impl JobType {
    pub fn as_str(self) -> &'static str {
        match self {
            JobType::Serial => "SERIAL",
            JobType::Mpi => "MPI",
        }
    }
}

impl FromStr for JobType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SERIAL" => Ok(JobType::Serial),
            "MPI" => Ok(JobType::Mpi),
            _ => Err(Error::InvalidAttribute { key: "job_type".to_string(), reason: format!("{s:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecSlot {
    pub host: String,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub site: NodeId,
    pub vo: String,
    pub user: String,
    pub queue: String,
    pub submit: Timestamp,
    pub start: Timestamp,
    pub end: Timestamp,
    pub walltime_s: u64,
    pub cput_s: u64,
    pub exec_slots: Vec<ExecSlot>,
    pub job_type: JobType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LogError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

const REQUIRED_KEYS: [&str; 8] = ["user", "group", "queue", "start", "end", "exec_host", "resources_used.walltime", "resources_used.cput"];

/// `[H]H:MM:SS` with an unbounded hour field.
fn parse_duration(s: &str) -> Option<u64> {
    let mut parts = s.split(':');
    let h: u64 = parts.next()?.parse().ok()?;
    let m: u64 = parts.next()?.parse().ok()?;
    let sec: u64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || m >= 60 || sec >= 60 {
        return None;
    }
    h.checked_mul(3600)?.checked_add(m * 60 + sec)
}

fn parse_epoch(s: &str) -> Option<Timestamp> {
    DateTime::from_timestamp(s.parse::<i64>().ok()?, 0)
}

fn parse_slots(s: &str) -> Option<Vec<ExecSlot>> {
    s.split('+')
        .map(|entry| {
            let (host, slot) = entry.rsplit_once('/')?;
            if host.is_empty() {
                return None;
            }
            Some(ExecSlot { host: host.to_string(), slot: slot.parse().ok()? })
        })
        .collect()
}

fn parse_end_record(site: &NodeId, job_id: &str, body: &str) -> core::result::Result<JobRecord, String> {
    if job_id.is_empty() {
        return Err("empty job id".to_string());
    }
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for token in body.split_ascii_whitespace() {
        let (k, v) = token.split_once('=').ok_or_else(|| format!("token {token:?} is not key=value"))?;
        kv.insert(k, v);
    }
    if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !kv.contains_key(*k)) {
        return Err(format!("missing {missing}="));
    }
    let epoch = |key: &str| parse_epoch(kv[key]).ok_or_else(|| format!("bad {key}={:?}", kv[key]));
    let start = epoch("start")?;
    let end = epoch("end")?;
    if end < start {
        return Err("end precedes start".to_string());
    }
    let submit = match ["qtime", "ctime"].iter().find(|k| kv.contains_key(*k)) {
        Some(k) => epoch(k)?,
        None => start,
    };
    let walltime_s = parse_duration(kv["resources_used.walltime"]).ok_or("bad resources_used.walltime")?;
    let cput_s = parse_duration(kv["resources_used.cput"]).ok_or("bad resources_used.cput")?;
    let exec_slots = parse_slots(kv["exec_host"]).ok_or_else(|| format!("bad exec_host={:?}", kv["exec_host"]))?;
    for key in ["user", "group", "queue"] {
        if kv[key].is_empty() {
            return Err(format!("empty {key}"));
        }
    }
    let job_type = if exec_slots.len() >= 2 { JobType::Mpi } else { JobType::Serial };
    Ok(JobRecord {
        job_id: job_id.to_string(),
        site: site.clone(),
        vo: kv["group"].to_string(),
        user: kv["user"].to_string(),
        queue: kv["queue"].to_string(),
        submit,
        start,
        end,
        walltime_s,
        cput_s,
        exec_slots,
        job_type,
    })
}

/// Parses a PBS-style accounting log.
///
/// Each `E` record yields a job or an error entry; records of other types are
/// skipped, blank lines are ignored and lines with fewer than four
/// `;`-separated fields are reported as malformed. Line numbers start at 1.
pub fn parse_batch_log(site: &NodeId, text: &str) -> (Vec<JobRecord>, Vec<LogError>) {
    let mut jobs = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ';').collect();
        let err = |reason: String| LogError { line: i + 1, reason };
        if fields.len() < 4 {
            errors.push(err("expected date;type;id;attributes".to_string()));
            continue;
        }
        if fields[1] != "E" {
            continue;
        }
        if NaiveDateTime::parse_from_str(fields[0], "%m/%d/%Y %H:%M:%S").is_err() {
            errors.push(err(format!("bad record date {:?}", fields[0])));
            continue;
        }
        match parse_end_record(site, fields[2], fields[3]) {
            Ok(job) => jobs.push(job),
            Err(reason) => errors.push(err(reason)),
        }
    }
    (jobs, errors)
}

/// Accounted usage of one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub job_id: String,
    pub site: NodeId,
    pub vo: String,
    pub country: NodeId,
    pub end: Timestamp,
    pub cores: u32,
    pub core_seconds: u64,
    pub job_type: JobType,
}

impl UsageRecord {
    pub fn cpu_hours(&self) -> f64 {
        self.core_seconds as f64 / SECONDS_PER_HOUR as f64
    }

    fn key(&self) -> (NodeId, String) {
        (self.site.clone(), self.job_id.clone())
    }
}

fn country_of(registry: &Registry, site: &NodeId) -> Result<NodeId> {
    match registry.get(site) {
        Some(n) if n.kind == NodeKind::Site => {}
        _ => return Err(Error::UnknownSite(site.clone())),
    }
    registry.ancestor_of_kind(site, NodeKind::Country).map(|c| c.id.clone()).ok_or_else(|| Error::UnknownSite(site.clone()))
}

/// Corrected usage: MPI jobs are charged walltime on every allocated core,
/// serial jobs the larger of CPU time and walltime.
pub fn normalize(job: &JobRecord, registry: &Registry) -> Result<UsageRecord> {
    let country = country_of(registry, &job.site)?;
    let cores = job.exec_slots.len().max(1) as u32;
    let core_seconds = match job.job_type {
        JobType::Mpi => job.walltime_s * u64::from(cores),
        JobType::Serial => job.cput_s.max(job.walltime_s),
    };
    Ok(UsageRecord {
        job_id: job.job_id.clone(),
        site: job.site.clone(),
        vo: job.vo.clone(),
        country,
        end: job.end,
        cores,
        core_seconds,
        job_type: job.job_type,
    })
}

/// What a standard serial publisher records for any job: a single core
/// charged `max(cput, walltime)`, where `cput` covers the mother node only.
pub fn publisher_record(job: &JobRecord, registry: &Registry) -> Result<UsageRecord> {
    let country = country_of(registry, &job.site)?;
    Ok(UsageRecord {
        job_id: job.job_id.clone(),
        site: job.site.clone(),
        vo: job.vo.clone(),
        country,
        end: job.end,
        cores: 1,
        core_seconds: job.cput_s.max(job.walltime_s),
        job_type: job.job_type,
    })
}

fn sort_records(records: &mut [UsageRecord]) {
    records.sort_by(|a, b| (a.end, &a.site, &a.job_id).cmp(&(b.end, &b.site, &b.job_id)));
}

/// Union of both streams keyed by `(site, job_id)`; MPI records win
/// collisions. Sorted by `(end, site, job_id)`.
pub fn merge_streams(serial: &[UsageRecord], mpi: &[UsageRecord]) -> Vec<UsageRecord> {
    let mut by_key: BTreeMap<(NodeId, String), UsageRecord> = BTreeMap::new();
    for r in serial.iter().chain(mpi.iter()) {
        by_key.insert(r.key(), r.clone());
    }
    let mut out: Vec<UsageRecord> = by_key.into_values().collect();
    sort_records(&mut out);
    out
}

/// Serial-publisher records for every job plus corrected records for MPI jobs.
pub fn streams(jobs: &[JobRecord], registry: &Registry) -> Result<(Vec<UsageRecord>, Vec<UsageRecord>)> {
    let mut serial = Vec::with_capacity(jobs.len());
    let mut mpi = Vec::new();
    for job in jobs {
        serial.push(publisher_record(job, registry)?);
        if job.job_type == JobType::Mpi {
            mpi.push(normalize(job, registry)?);
        }
    }
    Ok((serial, mpi))
}

/// Both accounting streams of the desk, each deduplicated by `(site, job_id)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageStore {
    serial: Vec<UsageRecord>,
    mpi: Vec<UsageRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub jobs: usize,
    pub mpi_jobs: usize,
    pub replaced: usize,
}

impl UsageStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds every job into the serial stream and MPI jobs also into the MPI
    /// stream. Re-ingesting a job replaces its earlier records.
    pub fn ingest(&mut self, jobs: &[JobRecord], registry: &Registry) -> Result<IngestSummary> {
        let (serial, mpi) = streams(jobs, registry)?;
        Ok(self.absorb(serial, mpi))
    }

    /// Adds already normalized stream records.
    pub fn absorb(&mut self, serial: Vec<UsageRecord>, mpi: Vec<UsageRecord>) -> IngestSummary {
        let mut summary = IngestSummary { jobs: serial.len(), mpi_jobs: mpi.len(), replaced: 0 };
        summary.replaced = upsert(&mut self.serial, serial);
        upsert(&mut self.mpi, mpi);
        summary
    }

    pub fn serial(&self) -> &[UsageRecord] {
        &self.serial
    }

    pub fn mpi(&self) -> &[UsageRecord] {
        &self.mpi
    }

    pub fn merged(&self) -> Vec<UsageRecord> {
        merge_streams(&self.serial, &self.mpi)
    }

    pub fn len(&self) -> usize {
        self.serial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.serial.is_empty()
    }
}

fn upsert(stream: &mut Vec<UsageRecord>, incoming: Vec<UsageRecord>) -> usize {
    let mut by_key: BTreeMap<(NodeId, String), UsageRecord> = stream.drain(..).map(|r| (r.key(), r)).collect();
    let mut replaced = 0;
    for r in incoming {
        if by_key.insert(r.key(), r).is_some() {
            replaced += 1;
        }
    }
    stream.extend(by_key.into_values());
    sort_records(stream);
    replaced
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dim {
    Vo,
    Country,
    Site,
    Month,
    JobType,
}

impl Dim {
    pub const ALL: [Dim; 5] = [Dim::Vo, Dim::Country, Dim::Site, Dim::Month, Dim::JobType];

    pub fn as_str(self) -> &'static str {
        match self {
            Dim::Vo => "VO",
            Dim::Country => "COUNTRY",
            Dim::Site => "SITE",
            Dim::Month => "MONTH",
            Dim::JobType => "JOB_TYPE",
        }
    }

    /// Label of a record along this dimension; months are `YYYY-MM` of the end time.
    pub fn label(self, r: &UsageRecord) -> String {
        match self {
            Dim::Vo => r.vo.clone(),
            Dim::Country => r.country.as_str().to_string(),
            Dim::Site => r.site.as_str().to_string(),
            Dim::Month => format!("{:04}-{:02}", r.end.year(), r.end.month()),
            Dim::JobType => r.job_type.as_str().to_string(),
        }
    }
}

impl FromStr for Dim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dim::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidAttribute { key: "dimension".to_string(), reason: format!("{s:?}") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    CpuHours,
    CpuYears,
    JobCount,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::CpuHours, Metric::CpuYears, Metric::JobCount];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CpuHours => "CPU_HOURS",
            Metric::CpuYears => "CPU_YEARS",
            Metric::JobCount => "JOB_COUNT",
        }
    }

    /// Contribution of one record in the metric's exact base unit.
    pub fn raw(self, r: &UsageRecord) -> u128 {
        match self {
            Metric::CpuHours | Metric::CpuYears => u128::from(r.core_seconds),
            Metric::JobCount => 1,
        }
    }

    /// Base units per rendered unit.
    pub fn divisor(self) -> u128 {
        match self {
            Metric::CpuHours => u128::from(SECONDS_PER_HOUR),
            Metric::CpuYears => u128::from(SECONDS_PER_HOUR * HOURS_PER_CPU_YEAR),
            Metric::JobCount => 1,
        }
    }

    pub fn render(self, raw: u128) -> f64 {
        let d = self.divisor();
        // Split to keep the integer part exact beyond 2^53 base units.
        (raw / d) as f64 + (raw % d) as f64 / d as f64
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidAttribute { key: "metric".to_string(), reason: format!("{s:?}") })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_type: Option<JobType>,
}

impl UsageFilter {
    pub fn matches(&self, r: &UsageRecord) -> bool {
        self.vo.as_ref().is_none_or(|v| v == &r.vo)
            && self.country.as_ref().is_none_or(|c| c == &r.country)
            && self.site.as_ref().is_none_or(|s| s == &r.site)
            && self.window.as_ref().is_none_or(|w| w.contains(r.end))
            && self.job_type.is_none_or(|t| t == r.job_type)
    }
}

/// Integer pivot in the metric's base unit, dense over the observed labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub rows_dim: Dim,
    pub cols_dim: Dim,
    pub metric: Metric,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: BTreeMap<(String, String), u128>,
}

impl RawTable {
    pub fn cell(&self, row: &str, col: &str) -> u128 {
        self.cells.get(&(row.to_string(), col.to_string())).copied().unwrap_or(0)
    }

    pub fn grand_total(&self) -> u128 {
        self.cells.values().sum()
    }

    pub fn render(&self) -> UsageTable {
        let m = self.metric;
        let mut cells = Vec::with_capacity(self.rows.len() * self.cols.len());
        let mut row_totals = BTreeMap::new();
        let mut col_raw: BTreeMap<&str, u128> = self.cols.iter().map(|c| (c.as_str(), 0)).collect();
        for row in &self.rows {
            let mut row_raw = 0u128;
            for col in &self.cols {
                let raw = self.cell(row, col);
                row_raw += raw;
                *col_raw.get_mut(col.as_str()).expect("known column") += raw;
                cells.push(UsageCell { row: row.clone(), col: col.clone(), value: m.render(raw) });
            }
            row_totals.insert(row.clone(), m.render(row_raw));
        }
        let col_totals = col_raw.into_iter().map(|(c, raw)| (c.to_string(), m.render(raw))).collect();
        UsageTable {
            rows_dim: self.rows_dim,
            cols_dim: self.cols_dim,
            metric: m,
            cells,
            row_totals,
            col_totals,
            grand_total: m.render(self.grand_total()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageCell {
    pub row: String,
    pub col: String,
    pub value: f64,
}

/// Rendered pivot table. Cells are listed row-major over sorted labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageTable {
    pub rows_dim: Dim,
    pub cols_dim: Dim,
    pub metric: Metric,
    pub cells: Vec<UsageCell>,
    pub row_totals: BTreeMap<String, f64>,
    pub col_totals: BTreeMap<String, f64>,
    pub grand_total: f64,
}

/// Rounds to three fraction digits, the precision of the XML export.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.3}").parse().expect("formatted float parses")
}

impl UsageTable {
    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.row == row && c.col == col).map(|c| c.value)
    }

    /// Every value rounded as the XML export renders it.
    pub fn quantized(&self) -> UsageTable {
        let mut t = self.clone();
        for c in &mut t.cells {
            c.value = quantize(c.value);
        }
        for v in t.row_totals.values_mut().chain(t.col_totals.values_mut()) {
            *v = quantize(*v);
        }
        t.grand_total = quantize(t.grand_total);
        t
    }
}

pub fn query_raw(records: &[UsageRecord], filter: &UsageFilter, rows_dim: Dim, cols_dim: Dim, metric: Metric) -> Result<RawTable> {
    if rows_dim == cols_dim {
        return Err(Error::InvalidDims);
    }
    let mut rows = BTreeSet::new();
    let mut cols = BTreeSet::new();
    let mut cells: BTreeMap<(String, String), u128> = BTreeMap::new();
    for r in records.iter().filter(|r| filter.matches(r)) {
        let (row, col) = (rows_dim.label(r), cols_dim.label(r));
        rows.insert(row.clone());
        cols.insert(col.clone());
        *cells.entry((row, col)).or_insert(0) += metric.raw(r);
    }
    for row in &rows {
        for col in &cols {
            cells.entry((row.clone(), col.clone())).or_insert(0);
        }
    }
    Ok(RawTable { rows_dim, cols_dim, metric, rows: rows.into_iter().collect(), cols: cols.into_iter().collect(), cells })
}

/// Pivots the records matching `filter`. An empty selection yields an empty table.
pub fn query_usage(records: &[UsageRecord], filter: &UsageFilter, rows_dim: Dim, cols_dim: Dim, metric: Metric) -> Result<UsageTable> {
    Ok(query_raw(records, filter, rows_dim, cols_dim, metric)?.render())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub value: f64,
    /// Set when usage exceeded capacity and the value was clamped.
    pub overflow: bool,
}

/// `usage_hours / (avg_cpus × window hours)`, clamped to `[0, 1]`.
pub fn utilization(usage_hours: f64, avg_cpus: u64, window: Window) -> Result<Utilization> {
    if avg_cpus == 0 {
        return Err(Error::ZeroCapacity);
    }
    let raw = usage_hours / (avg_cpus as f64 * window.hours());
    Ok(Utilization { value: raw.clamp(0.0, 1.0), overflow: raw > 1.0 })
}
