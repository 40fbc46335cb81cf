#![allow(dead_code)]

use std::path::Path;

use chrono::{DateTime, Utc};
use gridops::config::Config;
use gridops::fixtures;
use gridops::suite::{FixedClock, Settings, Suite};
use gridops_core::registry::Actor;
use gridops_core::wms::AlarmRules;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const DN_HEADER: &str = "x-client-dn";

pub fn at(s: &str) -> DateTime<Utc> {
    gridops::formats::parse_instant(s).unwrap()
}

/// Clock used by fixture suites: just after the second fixture quarter.
pub fn fixture_now() -> DateTime<Utc> {
    at("2010-05-02T00:00:00Z")
}

pub fn settings() -> Settings {
    Settings { rules: AlarmRules::new(fixtures::alarm_rules()).unwrap(), rota: Some(fixtures::table1_rota()), ..Settings::default() }
}

pub fn open(dir: &Path) -> Suite {
    Suite::open(dir, settings(), Box::new(FixedClock::new(fixture_now()))).unwrap()
}

/// A suite holding the Table-1 registry and contacts.
pub fn registry_suite(dir: &Path) -> Suite {
    let mut s = open(dir);
    s.import_topology(fixtures::table1_topology()).unwrap();
    s.import_contacts(fixtures::table1_contacts()).unwrap();
    s
}

pub fn ingest_accounting(s: &mut Suite) {
    let logs = fixtures::accounting_logs(s.registry());
    for (site, text) in logs {
        s.ingest_accounting(&Actor::Operator, &site, &text).unwrap();
    }
}

pub fn ingest_quarter(s: &mut Suite, quarter: u32, target: f64) {
    let plan = fixtures::quarter_plan(s.registry(), quarter, s.settings().quarter_epoch, target);
    let results = fixtures::quarter_results(s.registry(), &plan, &s.settings().catalogue);
    let summary = s.record_results(&Actor::Operator, results.into_iter().map(Ok).collect()).unwrap();
    assert!(summary.rejected.is_empty());
}

pub fn ingest_wms(s: &mut Suite) {
    let snaps = fixtures::wms_snapshots(s.registry(), fixtures::wms_day());
    s.ingest_wms(&Actor::Operator, snaps.into_iter().map(Ok).collect()).unwrap();
}

/// Configuration for an in-process server: plain HTTP, identities from a header.
pub fn header_config() -> Config {
    let mut cfg = Config::default();
    cfg.server.trusted_proxy_header = Some(DN_HEADER.to_string());
    cfg
}

pub struct Server {
    pub base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<Result<(), gridops::SuiteError>>,
}

impl Server {
    pub async fn start(cfg: Config, suite: Suite) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let scheme = if cfg.server.tls_cert.is_some() { "https" } else { "http" };
        let base = format!("{scheme}://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(async move {
            gridops::cli::serve(&cfg, suite, listener, async {
                let _ = rx.await;
            })
            .await
        });
        Server { base, stop: Some(tx), handle }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.handle.await.unwrap().unwrap();
    }
}
