//! Periodic probe execution against the registry's active services.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gridops_core::probe::{due_probes, ProbeDefinition, ProbeExecutor, ProbeOutcome, ProbeResult, ProbeStatus};
use gridops_core::registry::{RegistryNode, TopologySnapshot};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::api::AppState;
use crate::error::SuiteError;

/// Checks that the service endpoint accepts a TCP connection.
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpConnectExecutor;

fn authority(endpoint: &str) -> &str {
    let rest = endpoint.split_once("://").map_or(endpoint, |(_, r)| r);
    rest.split('/').next().unwrap_or(rest)
}

impl ProbeExecutor for TcpConnectExecutor {
    fn execute(&self, service: &RegistryNode, probe: &ProbeDefinition, _at: gridops_core::time::Timestamp) -> ProbeOutcome {
        let Some(endpoint) = service.endpoint() else {
            return ProbeOutcome { status: ProbeStatus::Error, detail: "no endpoint".to_string() };
        };
        let addrs: Vec<_> = match authority(endpoint).to_socket_addrs() {
            Ok(a) => a.collect(),
            Err(e) => return ProbeOutcome { status: ProbeStatus::Error, detail: format!("resolve {endpoint}: {e}") },
        };
        let timeout = Duration::from_secs(u64::from(probe.timeout_s.max(1)));
        let started = Instant::now();
        let mut last = String::from("no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(_) => return ProbeOutcome { status: ProbeStatus::Ok, detail: format!("connected to {addr}") },
                Err(e) if e.kind() == std::io::ErrorKind::TimedOut => {
                    return ProbeOutcome { status: ProbeStatus::Timeout, detail: format!("{addr}: no answer in {timeout:?}") };
                }
                Err(e) => last = format!("{addr}: {e}"),
            }
            if started.elapsed() >= timeout {
                return ProbeOutcome { status: ProbeStatus::Timeout, detail: last };
            }
        }
        ProbeOutcome { status: ProbeStatus::Error, detail: last }
    }
}

/// Runs every due probe once, at most `parallelism` at a time, and records
/// the results. Returns how many new results were stored.
pub async fn run_once(state: &AppState, executor: Arc<dyn ProbeExecutor>, parallelism: usize) -> Result<usize, SuiteError> {
    let (now, due) = {
        let suite = state.read();
        let reg = suite.registry();
        let topology = TopologySnapshot { version: reg.version(), generated_at: reg.updated_at(), nodes: reg.nodes().cloned().collect() };
        let now = suite.now();
        let due = due_probes(now, &topology, &suite.results().last_run(), &suite.settings().catalogue);
        let due: Vec<(RegistryNode, ProbeDefinition)> =
            due.into_iter().filter_map(|d| topology.node(&d.service).map(|n| (n.clone(), d.probe))).collect();
        (now, due)
    };
    if due.is_empty() {
        return Ok(0);
    }
    let permits = Arc::new(Semaphore::new(parallelism.max(1)));
    let mut tasks = JoinSet::new();
    for (node, probe) in due {
        let permits = permits.clone();
        let executor = executor.clone();
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore open");
            let limit = Duration::from_secs(u64::from(probe.timeout_s.max(1)) + 1);
            let (svc, pid) = (node.id.clone(), probe.probe_id.clone());
            let job = tokio::task::spawn_blocking(move || executor.execute(&node, &probe, now));
            let outcome = match tokio::time::timeout(limit, job).await {
                Ok(Ok(o)) => o,
                Ok(Err(e)) => ProbeOutcome { status: ProbeStatus::Error, detail: format!("probe panicked: {e}") },
                Err(_) => ProbeOutcome { status: ProbeStatus::Timeout, detail: format!("no result in {limit:?}") },
            };
            ProbeResult { service: svc, probe_id: pid, timestamp: now, status: outcome.status, detail: outcome.detail }
        });
    }
    let mut results = Vec::new();
    while let Some(r) = tasks.join_next().await {
        if let Ok(r) = r {
            results.push(r);
        }
    }
    results.sort_by(|a, b| (&a.service, &a.probe_id).cmp(&(&b.service, &b.probe_id)));
    state.write().record_scheduled(results)
}

/// Ticks forever; each tick updates the liveness timestamp shown by `/healthz`.
pub async fn run(state: AppState, executor: Arc<dyn ProbeExecutor>, parallelism: usize, tick: Duration) {
    let status = &state.0.scheduler;
    status.enabled.store(true, Ordering::Relaxed);
    status.tick_s.store(tick.as_secs() as i64, Ordering::Relaxed);
    let mut interval = tokio::time::interval(tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        match run_once(&state, executor.clone(), parallelism).await {
            Ok(n) => tracing::debug!("probe tick stored {n} results"),
            Err(e) => tracing::error!("probe tick failed: {e}"),
        }
        let now = state.read().now().timestamp();
        status.last_tick.store(now, Ordering::Relaxed);
    }
}
