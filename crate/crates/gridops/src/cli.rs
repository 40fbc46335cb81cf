//! The `gridops` command line. Commands other than `serve` work directly on
//! the data directory as the local operator.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::future::Future;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use axum::http::HeaderName;
use chrono::NaiveDate;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridops_core::operations::{NewTicket, Severity, TicketState};
use gridops_core::probe::ProbeResult;
use gridops_core::registry::{Actor, NodeId, TopologySnapshot};
use gridops_core::time::Window;
use gridops_core::wms::WmsSnapshot;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio_rustls::TlsAcceptor;

use crate::api::{self, AppState, ServiceOptions};
use crate::config::Config;
use crate::error::SuiteError;
use crate::fixtures;
use crate::formats::{export_xml, parse_instant, parse_json_items, report_csv};
use crate::scheduler::{self, TcpConnectExecutor};
use crate::suite::{Clock, ContactsFile, FixedClock, Settings, Suite, SystemClock};
use crate::tls;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gridops", version, about = "Regional grid operations suite")]
pub struct Cli {
    /// Configuration file (default: $GRIDOPS_CONFIG, then ./gridops.toml).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Pins the clock to an RFC 3339 instant or a date.
    #[arg(long, global = true, value_name = "TIME")]
    pub now: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the HTTP API.
    Serve,
    /// Registry import and export.
    #[command(subcommand)]
    Topology(TopologyCmd),
    /// Contacts and certificate identity mappings.
    #[command(subcommand)]
    Contacts(ContactsCmd),
    /// Loads probe results, accounting logs or WMS snapshots.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Availability, usage, status and resource reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Operator-on-duty rotation.
    #[command(subcommand)]
    Good(GoodCmd),
    /// Trouble tickets.
    #[command(subcommand)]
    Ticket(TicketCmd),
    /// Synthetic fixture corpora.
    #[command(subcommand)]
    Fixtures(FixturesCmd),
}

#[derive(Debug, Subcommand)]
pub enum TopologyCmd {
    /// Upserts every node of a topology snapshot.
    Import { file: PathBuf },
    /// Writes the topology under a scope.
    Export {
        #[arg(default_value = "-")]
        file: PathBuf,
        #[arg(long)]
        scope: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ContactsCmd {
    /// Imports contacts and certificate mappings.
    Import { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    /// Probe results as JSON lines or a JSON array.
    Results { file: PathBuf },
    /// A batch-system accounting log of one site.
    Accounting {
        #[arg(long)]
        site: String,
        file: PathBuf,
    },
    /// WMS metric snapshots as JSON lines or a JSON array.
    Wms { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Json,
    Xml,
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Availability for a quarter or an explicit window.
    Availability(AvailabilityArgs),
    /// Pivoted accounting usage.
    Usage(UsageArgs),
    /// Current service and site states.
    Status {
        #[arg(long)]
        scope: Option<String>,
    },
    /// Resource totals under a scope.
    Summary {
        #[arg(long)]
        scope: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct AvailabilityArgs {
    #[arg(long, conflicts_with_all = ["from", "to", "scope"], required_unless_present = "from")]
    pub quarter: Option<u32>,
    #[arg(long, requires = "to")]
    pub from: Option<String>,
    #[arg(long, requires = "from")]
    pub to: Option<String>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct UsageArgs {
    #[arg(long, default_value = "VO")]
    pub rows: String,
    #[arg(long, default_value = "COUNTRY")]
    pub cols: String,
    #[arg(long, default_value = "CPU_HOURS")]
    pub metric: String,
    #[arg(long)]
    pub vo: Option<String>,
    #[arg(long)]
    pub country: Option<String>,
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub from: Option<String>,
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long)]
    pub job_type: Option<String>,
    #[arg(long, value_enum, default_value_t = TableFormat::Json)]
    pub format: TableFormat,
}

#[derive(Debug, Subcommand)]
pub enum GoodCmd {
    /// The country on duty for a date (default: today).
    Current {
        #[arg(long)]
        date: Option<NaiveDate>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TicketCmd {
    /// Opens a ticket against a site.
    Open {
        #[arg(long)]
        site: String,
        #[arg(long, default_value = "SIMPLE")]
        severity: String,
        #[arg(long)]
        summary: String,
    },
    /// Lists tickets, optionally in one state.
    List {
        #[arg(long)]
        state: Option<String>,
    },
    /// Moves a ticket to another state.
    Transition {
        id: u64,
        #[arg(long)]
        to: String,
        #[arg(long, default_value = "")]
        note: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Registry, contacts, rota and alarm rules.
    Table1,
    /// Adds quarterly probe results.
    Availability,
    /// Adds accounting logs.
    Accounting,
    /// Everything, including WMS snapshots.
    Full,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCmd {
    /// Writes a configuration and fixture files into a directory.
    Generate {
        #[arg(long, value_enum)]
        profile: Profile,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Streams used by a command.
pub struct Io<'a> {
    pub stdin: &'a mut dyn Read,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run<I, T>(args: I, io: Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = io.stdout.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = io.stderr.write_all(text.as_bytes());
                    EXIT_USER
                }
            };
        }
    };
    match execute(cli, io.stdin, io.stderr) {
        Ok(body) => {
            if !body.is_empty() {
                let _ = io.stdout.write_all(body.as_bytes());
                if !body.ends_with('\n') {
                    let _ = io.stdout.write_all(b"\n");
                }
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {}: {e}", e.code());
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, SuiteError> {
    serde_json::to_string(value).map_err(|e| SuiteError::Store(e.to_string()))
}

fn read_input(path: &Path, stdin: &mut dyn Read) -> Result<String, SuiteError> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        stdin.read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| SuiteError::bad_request("INPUT_FILE", format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<Config, SuiteError> {
    let mut cfg = Config::discover(cli.config.as_deref())?;
    if let Some(d) = &cli.data_dir {
        cfg.store.data_dir = d.clone();
    }
    Ok(cfg)
}

fn clock(now: Option<&str>) -> Result<Box<dyn Clock>, SuiteError> {
    Ok(match now {
        Some(t) => Box::new(FixedClock::new(parse_instant(t)?)),
        None => Box::new(SystemClock),
    })
}

fn open_suite(cli: &Cli, cfg: &Config) -> Result<Suite, SuiteError> {
    Suite::open(&cfg.store.data_dir, Settings::from_config(cfg)?, clock(cli.now.as_deref())?)
}

fn node(s: &Option<String>) -> Option<NodeId> {
    s.as_deref().map(NodeId::from)
}

fn execute(cli: Cli, stdin: &mut dyn Read, stderr: &mut dyn Write) -> Result<String, SuiteError> {
    if let Command::Fixtures(FixturesCmd::Generate { profile, out }) = &cli.command {
        return generate_fixtures(*profile, out);
    }
    let cfg = load_config(&cli)?;
    if let Command::Serve = cli.command {
        let suite = open_suite(&cli, &cfg)?;
        serve_blocking(&cfg, suite, stderr)?;
        return Ok(String::new());
    }
    let mut suite = open_suite(&cli, &cfg)?;
    let op = Actor::Operator;
    match &cli.command {
        Command::Serve | Command::Fixtures(_) => unreachable!("handled above"),
        Command::Topology(TopologyCmd::Import { file }) => {
            let snap: TopologySnapshot = serde_json::from_str(&read_input(file, stdin)?)?;
            to_json(&json!({ "imported": suite.import_topology(snap)? }))
        }
        Command::Topology(TopologyCmd::Export { file, scope }) => {
            let body = to_json(&suite.topology(node(scope).as_ref())?)?;
            if file.as_os_str() == "-" {
                return Ok(body);
            }
            std::fs::write(file, body + "\n")?;
            Ok(String::new())
        }
        Command::Contacts(ContactsCmd::Import { file }) => {
            let contacts: ContactsFile = serde_json::from_str(&read_input(file, stdin)?)?;
            to_json(&json!({ "imported": suite.import_contacts(contacts)? }))
        }
        Command::Ingest(IngestCmd::Results { file }) => {
            let items = parse_json_items::<ProbeResult>(&read_input(file, stdin)?);
            to_json(&suite.record_results(&op, items)?)
        }
        Command::Ingest(IngestCmd::Accounting { site, file }) => {
            let text = read_input(file, stdin)?;
            let summary = suite.ingest_accounting(&op, &NodeId::from(site.as_str()), &text)?;
            let _ = writeln!(stderr, "{}", summary.summary);
            to_json(&summary)
        }
        Command::Ingest(IngestCmd::Wms { file }) => {
            let items = parse_json_items::<WmsSnapshot>(&read_input(file, stdin)?);
            to_json(&suite.ingest_wms(&op, items)?)
        }
        Command::Report(ReportCmd::Availability(a)) => {
            let report = match a.quarter {
                Some(n) => suite.quarter_report(n)?,
                None => {
                    let (from, to) = (a.from.as_deref().unwrap_or_default(), a.to.as_deref().unwrap_or_default());
                    let window = Window::new(parse_instant(from)?, parse_instant(to)?)?;
                    suite.availability(node(&a.scope).as_ref(), window)?
                }
            };
            match a.format {
                ReportFormat::Json => to_json(&report),
                ReportFormat::Csv => Ok(report_csv(&report)),
            }
        }
        Command::Report(ReportCmd::Usage(u)) => {
            let mut q = BTreeMap::new();
            let pairs = [
                ("rows", Some(&u.rows)),
                ("cols", Some(&u.cols)),
                ("metric", Some(&u.metric)),
                ("vo", u.vo.as_ref()),
                ("country", u.country.as_ref()),
                ("site", u.site.as_ref()),
                ("from", u.from.as_ref()),
                ("to", u.to.as_ref()),
                ("job_type", u.job_type.as_ref()),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    q.insert(k.to_string(), v.clone());
                }
            }
            let (filter, rows, cols, metric) = api::usage_query(&q)?;
            let table = suite.usage_table(&filter, rows, cols, metric)?;
            match u.format {
                TableFormat::Json => to_json(&table),
                TableFormat::Xml => Ok(export_xml(&table)),
            }
        }
        Command::Report(ReportCmd::Status { scope }) => to_json(&suite.status(node(scope).as_ref())?),
        Command::Report(ReportCmd::Summary { scope }) => to_json(&suite.summary(node(scope).as_ref())?),
        Command::Good(GoodCmd::Current { date }) => to_json(&suite.good(*date)?),
        Command::Ticket(TicketCmd::Open { site, severity, summary }) => {
            let severity: Severity = serde_json::from_value(json!(severity.to_ascii_uppercase()))
                .map_err(|_| SuiteError::bad_request("INVALID_SEVERITY", format!("{severity:?} is not SIMPLE or COMPLEX")))?;
            let request = NewTicket { site: NodeId::from(site.as_str()), severity, summary: summary.clone(), evidence: Vec::new() };
            to_json(&suite.open_ticket(&op, request)?)
        }
        Command::Ticket(TicketCmd::List { state }) => {
            let state = state.as_deref().map(TicketState::from_str).transpose()?;
            to_json(&api::tickets_body(&suite, state))
        }
        Command::Ticket(TicketCmd::Transition { id, to, note }) => {
            let to = TicketState::from_str(to)?;
            to_json(&suite.transition_ticket(&op, *id, to, note)?)
        }
    }
}

// ---- serve ------------------------------------------------------------------

fn options(cfg: &Config) -> Result<ServiceOptions, SuiteError> {
    let trusted_header = match &cfg.server.trusted_proxy_header {
        Some(h) => Some(HeaderName::from_str(h).map_err(|e| SuiteError::Config(format!("trusted_proxy_header {h:?}: {e}")))?),
        None => None,
    };
    Ok(ServiceOptions { trusted_header, console_dir: cfg.server.console_dir.clone(), console_refresh_s: cfg.server.console_refresh_s })
}

fn acceptor(cfg: &Config) -> Result<Option<TlsAcceptor>, SuiteError> {
    match (&cfg.server.tls_cert, &cfg.server.tls_key) {
        (Some(cert), Some(key)) => {
            let server = tls::server_config(cert, key, cfg.server.tls_client_ca.as_deref())?;
            Ok(Some(TlsAcceptor::from(Arc::new(server))))
        }
        _ => Ok(None),
    }
}

/// Serves `suite` on `listener` until `shutdown` resolves, then compacts the store.
pub async fn serve(cfg: &Config, suite: Suite, listener: TcpListener, shutdown: impl Future<Output = ()>) -> Result<(), SuiteError> {
    let acceptor = acceptor(cfg)?;
    if acceptor.is_none() {
        tracing::warn!("no TLS certificate configured; serving plain HTTP");
    }
    let state = AppState::new(suite, options(cfg)?);
    let app = api::router(state.clone());
    let probes = cfg.probes.enabled.then(|| {
        let tick = Duration::from_secs(cfg.probes.tick_s);
        tokio::spawn(scheduler::run(state.clone(), Arc::new(TcpConnectExecutor), cfg.probes.parallelism, tick))
    });
    tls::serve(listener, acceptor, app, shutdown).await;
    if let Some(task) = probes {
        task.abort();
    }
    let mut suite = state.write();
    suite.compact_all()
}

async fn termination() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn serve_blocking(cfg: &Config, suite: Suite, stderr: &mut dyn Write) -> Result<(), SuiteError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = TcpListener::bind(&cfg.server.listen).await.map_err(|e| SuiteError::Config(format!("listen {}: {e}", cfg.server.listen)))?;
        let addr = listener.local_addr()?;
        let scheme = if cfg.server.tls_cert.is_some() { "https" } else { "http" };
        let _ = writeln!(stderr, "listening on {scheme}://{addr}");
        let _ = stderr.flush();
        serve(cfg, suite, listener, termination()).await
    })
}

// ---- fixtures -----------------------------------------------------------------

fn write_file(out: &Path, name: &str, body: &str, files: &mut Vec<String>) -> Result<(), SuiteError> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, body)?;
    files.push(name.to_string());
    Ok(())
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String, SuiteError> {
    let mut s = String::new();
    for i in items {
        s.push_str(&to_json(i)?);
        s.push('\n');
    }
    Ok(s)
}

fn pretty<T: Serialize>(value: &T) -> Result<String, SuiteError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| SuiteError::Store(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn fixture_config() -> Config {
    let mut cfg = Config::default();
    cfg.store.data_dir = PathBuf::from("data");
    cfg.alarms.rules = Some(PathBuf::from("alarms.json"));
    cfg.operations.rota = Some(PathBuf::from("rota.json"));
    cfg
}

/// Writes a self-contained fixture directory, including a `gridops.toml` that
/// points at it.
pub fn generate_fixtures(profile: Profile, out: &Path) -> Result<String, SuiteError> {
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let cfg = fixture_config();
    let toml = toml::to_string(&cfg).map_err(|e| SuiteError::Config(e.to_string()))?;
    write_file(out, "gridops.toml", &toml, &mut files)?;
    write_file(out, "topology.json", &pretty(&fixtures::table1_topology())?, &mut files)?;
    write_file(out, "contacts.json", &pretty(&fixtures::table1_contacts())?, &mut files)?;
    write_file(out, "rota.json", &pretty(&fixtures::table1_rota())?, &mut files)?;
    write_file(out, "alarms.json", &pretty(&fixtures::alarm_rules())?, &mut files)?;

    let registry = fixtures::table1_registry();
    if matches!(profile, Profile::Availability | Profile::Full) {
        let catalogue = Settings::default().catalogue;
        for (q, target) in [(5, fixtures::Q5_TARGET), (8, fixtures::Q8_TARGET)] {
            let plan = fixtures::quarter_plan(&registry, q, cfg.sla.quarter_epoch, target);
            let results = fixtures::quarter_results(&registry, &plan, &catalogue);
            write_file(out, &format!("results-q{q}.jsonl"), &json_lines(&results)?, &mut files)?;
        }
    }
    if matches!(profile, Profile::Accounting | Profile::Full) {
        for (site, log) in fixtures::accounting_logs(&registry) {
            write_file(out, &format!("accounting/{site}.log"), &log, &mut files)?;
        }
    }
    if profile == Profile::Full {
        let snaps = fixtures::wms_snapshots(&registry, fixtures::wms_day());
        write_file(out, "wms.jsonl", &json_lines(&snaps)?, &mut files)?;
    }
    to_json(&json!({ "profile": format!("{profile:?}").to_ascii_lowercase(), "files": files }))
}
