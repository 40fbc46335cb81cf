//! HTTP API under `/api/v1`, plus `/healthz` and the static console.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Path, Query, State};
use axum::http::header::{ACCEPT, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate};
use gridops_core::accounting::{Dim, JobType, Metric, UsageFilter};
use gridops_core::operations::{NewTicket, Ticket, TicketState};
use gridops_core::probe::ProbeResult;
use gridops_core::registry::{NodeId, RegistryNode};
use gridops_core::time::{Timestamp, Window};
use gridops_core::wms::{AlarmState, WmsSnapshot};
use gridops_core::Error as DomainError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

use crate::auth::{authenticate, ApiIdentity, PeerDn};
use crate::error::SuiteError;
use crate::formats::{export_xml, parse_instant, parse_json_items, report_csv};
use crate::suite::{SubsystemHealth, Suite, VERSION};

pub const API_BASE: &str = "/api/v1";
pub const XML_MEDIA: &str = "application/xml";
/// Largest accepted request body; a quarter of probe results is about 40 MB.
pub const BODY_LIMIT: usize = 256 << 20;

/// Liveness of the background probe scheduler.
#[derive(Debug, Default)]
pub struct SchedulerStatus {
    pub enabled: AtomicBool,
    pub tick_s: AtomicI64,
    /// Unix seconds of the last completed tick; 0 before the first.
    pub last_tick: AtomicI64,
}

impl SchedulerStatus {
    pub fn health(&self, now: Timestamp) -> SubsystemHealth {
        if !self.enabled.load(Ordering::Relaxed) {
            return SubsystemHealth { ok: true, reason: Some("disabled".to_string()) };
        }
        let last = self.last_tick.load(Ordering::Relaxed);
        let tick = self.tick_s.load(Ordering::Relaxed).max(1);
        if last == 0 {
            return SubsystemHealth { ok: true, reason: Some("starting".to_string()) };
        }
        let age = now.timestamp() - last;
        if age > 3 * tick + 5 {
            SubsystemHealth { ok: false, reason: Some(format!("last tick {age} s ago")) }
        } else {
            SubsystemHealth { ok: true, reason: None }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Header trusted to carry the client DN; `None` disables header identities.
    pub trusted_header: Option<HeaderName>,
    pub console_dir: Option<PathBuf>,
    pub console_refresh_s: u32,
}

pub struct Shared {
    suite: RwLock<Suite>,
    pub options: ServiceOptions,
    pub scheduler: SchedulerStatus,
}

#[derive(Clone)]
pub struct AppState(pub Arc<Shared>);

impl AppState {
    pub fn new(suite: Suite, options: ServiceOptions) -> Self {
        AppState(Arc::new(Shared { suite: RwLock::new(suite), options, scheduler: SchedulerStatus::default() }))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Suite> {
        self.0.suite.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Suite> {
        self.0.suite.write().unwrap_or_else(|e| e.into_inner())
    }
}

/// Error body: `{"code": ..., "message": ...}`.
pub struct ApiError(pub SuiteError);

impl<E: Into<SuiteError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

pub fn status_of(e: &SuiteError) -> StatusCode {
    match e {
        SuiteError::Unauthenticated => StatusCode::UNAUTHORIZED,
        SuiteError::UnknownDn(_) => StatusCode::FORBIDDEN,
        SuiteError::Domain(d) => match d {
            DomainError::AuthzDenied | DomainError::UnknownIdentity(_) => StatusCode::FORBIDDEN,
            DomainError::UnknownNode(_)
            | DomainError::UnknownService(_)
            | DomainError::UnknownSite(_)
            | DomainError::UnknownWms(_)
            | DomainError::UnknownTicket(_) => StatusCode::NOT_FOUND,
            DomainError::IllegalTransition { .. }
            | DomainError::NonMonotoneTime
            | DomainError::DuplicateTimestamp(_)
            | DomainError::DuplicateSiblingName(_)
            | DomainError::DuplicateIdentity(_) => StatusCode::CONFLICT,
            DomainError::PayloadTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        },
        SuiteError::BadRequest { .. } | SuiteError::Io(_) => StatusCode::BAD_REQUEST,
        SuiteError::Config(_) | SuiteError::Locked(_) | SuiteError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.0.code(), "message": self.0.to_string() });
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Caller identity, or why there is none.
pub struct Caller(pub Result<ApiIdentity, SuiteError>);

impl FromRequestParts<AppState> for Caller {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let peer = parts.extensions.get::<PeerDn>();
        let header = state.0.options.trusted_header.as_ref().and_then(|h| parts.headers.get(h)).and_then(|v| v.to_str().ok());
        let enabled = state.0.options.trusted_header.is_some();
        let suite = state.read();
        Ok(Caller(authenticate(peer, header, enabled, suite.registry())))
    }
}

type Params = Query<BTreeMap<String, String>>;

fn param<'a>(q: &'a BTreeMap<String, String>, key: &str) -> Option<&'a str> {
    q.get(key).map(String::as_str).filter(|v| !v.is_empty())
}

fn required<'a>(q: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, SuiteError> {
    param(q, key).ok_or_else(|| SuiteError::bad_request("MISSING_PARAMETER", format!("query parameter {key} is required")))
}

fn scope(q: &BTreeMap<String, String>) -> Option<NodeId> {
    param(q, "scope").map(NodeId::from)
}

/// Far end used when a history query leaves the window open.
fn open_window(q: &BTreeMap<String, String>) -> Result<Window, SuiteError> {
    let from = match param(q, "from") {
        Some(s) => parse_instant(s)?,
        None => DateTime::UNIX_EPOCH,
    };
    let to = match param(q, "to") {
        Some(s) => parse_instant(s)?,
        None => parse_instant("2100-01-01")?,
    };
    Ok(Window::new(from, to)?)
}

/// Runs a mutating operation: requires an identity and records exactly one
/// audit entry, including for rejected requests.
fn mutate<T: Serialize>(
    state: &AppState,
    caller: Caller,
    operation: &str,
    target: &str,
    success: StatusCode,
    f: impl FnOnce(&mut Suite, &ApiIdentity) -> Result<T, SuiteError>,
) -> ApiResult<Response> {
    let mut suite = state.write();
    let identity = match caller.0 {
        Ok(id) => id,
        Err(e) => {
            suite.record_audit("anonymous", operation, target, e.code())?;
            return Err(e.into());
        }
    };
    let value = f(&mut suite, &identity)?;
    Ok((success, Json(value)).into_response())
}

/// Audits a request rejected before it reached the domain layer.
fn reject(suite: &mut Suite, identity: &ApiIdentity, operation: &str, target: &str, e: SuiteError) -> SuiteError {
    match suite.record_audit(&identity.subject_dn, operation, target, e.code()) {
        Ok(()) => e,
        Err(store) => store,
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/topology", get(topology))
        .route("/nodes/{id}", put(put_node))
        .route("/summary", get(summary))
        .route("/results", post(post_results))
        .route("/status", get(status))
        .route("/availability", get(availability))
        .route("/reports/quarter/{n}", get(quarter_report))
        .route("/accounting/logs", post(post_accounting))
        .route("/accounting/query", get(accounting_query))
        .route("/wms/snapshots", post(post_wms))
        .route("/wms/{id}/history", get(wms_history))
        .route("/alarms", get(alarms))
        .route("/tickets", post(post_ticket).get(list_tickets))
        .route("/tickets/{id}", patch(patch_ticket))
        .route("/good/current", get(good_current))
        .route("/suggestions", get(suggestions))
        .route("/console-config", get(console_config))
        .layer(DefaultBodyLimit::max(BODY_LIMIT));
    let mut app = Router::new().nest(API_BASE, api).route("/healthz", get(healthz));
    match &state.0.options.console_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app = app.nest_service("/console", ServeDir::new(dir).fallback(ServeFile::new(index)));
        }
        None => {
            app = app.route("/console", get(no_console)).route("/console/{*rest}", get(no_console));
        }
    }
    app.with_state(state)
}

async fn no_console() -> ApiError {
    ApiError(SuiteError::bad_request("CONSOLE_NOT_INSTALLED", "no console_dir configured"))
}

async fn topology(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    Ok(Json(st.read().topology(scope(&q).as_ref())?).into_response())
}

async fn summary(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    Ok(Json(st.read().summary(scope(&q).as_ref())?).into_response())
}

async fn put_node(State(st): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    mutate(&st, caller, "upsert_node", &id, StatusCode::OK, |suite, who| {
        let node: RegistryNode = serde_json::from_slice(&body).map_err(|e| reject(suite, who, "upsert_node", &id, e.into()))?;
        if node.id.as_str() != id {
            let e = SuiteError::bad_request("ID_MISMATCH", format!("body id {} differs from path id {id}", node.id));
            return Err(reject(suite, who, "upsert_node", &id, e));
        }
        let id = suite.upsert_node(&who.actor(), node)?;
        let version = suite.registry().version();
        Ok(json!({ "id": id, "version": version }))
    })
}

async fn post_results(State(st): State<AppState>, caller: Caller, body: Bytes) -> ApiResult<Response> {
    mutate(&st, caller, "record_results", "results", StatusCode::OK, |suite, who| {
        let text = std::str::from_utf8(&body)
            .map_err(|_| reject(suite, who, "record_results", "results", SuiteError::bad_request("INVALID_UTF8", "body is not UTF-8")))?;
        let items = parse_json_items::<ProbeResult>(text);
        suite.record_results(&who.actor(), items)
    })
}

async fn status(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    Ok(Json(st.read().status(scope(&q).as_ref())?).into_response())
}

async fn availability(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let window = Window::new(parse_instant(required(&q, "from")?)?, parse_instant(required(&q, "to")?)?)?;
    let report = st.read().availability(scope(&q).as_ref(), window)?;
    Ok(Json(report).into_response())
}

fn wants_csv(q: &BTreeMap<String, String>, headers: &HeaderMap) -> bool {
    param(q, "format") == Some("csv") || headers.get(ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|a| a.contains("text/csv"))
}

async fn quarter_report(State(st): State<AppState>, Path(n): Path<String>, Query(q): Params, headers: HeaderMap) -> ApiResult<Response> {
    let n: u32 = n.parse().map_err(|_| SuiteError::Domain(DomainError::InvalidQuarter(n.clone())))?;
    let report = st.read().quarter_report(n)?;
    if wants_csv(&q, &headers) {
        return Ok(([(CONTENT_TYPE, "text/csv")], report_csv(&report)).into_response());
    }
    Ok(Json(report).into_response())
}

async fn post_accounting(State(st): State<AppState>, caller: Caller, Query(q): Params, body: Bytes) -> ApiResult<Response> {
    let site = param(&q, "site").unwrap_or("").to_string();
    mutate(&st, caller, "ingest_accounting", &site, StatusCode::OK, |suite, who| {
        if site.is_empty() {
            let e = SuiteError::bad_request("MISSING_PARAMETER", "query parameter site is required");
            return Err(reject(suite, who, "ingest_accounting", &site, e));
        }
        let text = String::from_utf8_lossy(&body);
        suite.ingest_accounting(&who.actor(), &NodeId::new(site.clone()), &text)
    })
}

/// Filter and pivot parameters of a usage query.
pub fn usage_query(q: &BTreeMap<String, String>) -> Result<(UsageFilter, Dim, Dim, Metric), SuiteError> {
    let rows: Dim = param(q, "rows").unwrap_or("VO").parse()?;
    let cols: Dim = param(q, "cols").unwrap_or("COUNTRY").parse()?;
    let metric: Metric = param(q, "metric").unwrap_or("CPU_HOURS").parse()?;
    let window = match (param(q, "from"), param(q, "to")) {
        (None, None) => None,
        (from, to) => {
            Some(open_window(&[("from", from), ("to", to)].into_iter().filter_map(|(k, v)| Some((k.to_string(), v?.to_string()))).collect())?)
        }
    };
    let filter = UsageFilter {
        vo: param(q, "vo").map(str::to_string),
        country: param(q, "country").map(NodeId::from),
        site: param(q, "site").map(NodeId::from),
        window,
        job_type: param(q, "job_type").map(str::parse::<JobType>).transpose()?,
    };
    Ok((filter, rows, cols, metric))
}

fn wants_xml(q: &BTreeMap<String, String>, headers: &HeaderMap) -> bool {
    param(q, "format") == Some("xml") || headers.get(ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|a| a.contains(XML_MEDIA))
}

async fn accounting_query(State(st): State<AppState>, Query(q): Params, headers: HeaderMap) -> ApiResult<Response> {
    let (filter, rows, cols, metric) = usage_query(&q)?;
    let table = st.read().usage_table(&filter, rows, cols, metric)?;
    if wants_xml(&q, &headers) {
        return Ok(([(CONTENT_TYPE, XML_MEDIA)], export_xml(&table)).into_response());
    }
    Ok(Json(table).into_response())
}

async fn post_wms(State(st): State<AppState>, caller: Caller, body: Bytes) -> ApiResult<Response> {
    mutate(&st, caller, "ingest_wms", "wms", StatusCode::OK, |suite, who| {
        let text = std::str::from_utf8(&body)
            .map_err(|_| reject(suite, who, "ingest_wms", "wms", SuiteError::bad_request("INVALID_UTF8", "body is not UTF-8")))?;
        let items = parse_json_items::<WmsSnapshot>(text);
        suite.ingest_wms(&who.actor(), items)
    })
}

#[derive(Serialize)]
struct HistoryPoint {
    ts: Timestamp,
    value: f64,
}

async fn wms_history(State(st): State<AppState>, Path(id): Path<String>, Query(q): Params) -> ApiResult<Response> {
    let metric = required(&q, "metric")?;
    let window = open_window(&q)?;
    let points = st.read().wms_history(&NodeId::new(id.clone()), metric, window)?;
    let points: Vec<HistoryPoint> = points.into_iter().map(|(ts, value)| HistoryPoint { ts, value }).collect();
    Ok(Json(json!({ "wms": id, "metric": metric, "points": points })).into_response())
}

async fn alarms(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let state = match param(&q, "state") {
        None => None,
        Some(s) if s.eq_ignore_ascii_case("RAISED") => Some(AlarmState::Raised),
        Some(s) if s.eq_ignore_ascii_case("CLEARED") => Some(AlarmState::Cleared),
        Some(s) => return Err(SuiteError::bad_request("INVALID_PARAMETER", format!("unknown alarm state {s:?}")).into()),
    };
    let suite = st.read();
    let list: Vec<_> = suite.alarms().iter().filter(|a| state.is_none_or(|s| a.state == s)).collect();
    Ok(Json(json!({ "alarms": list })).into_response())
}

async fn post_ticket(State(st): State<AppState>, caller: Caller, body: Bytes) -> ApiResult<Response> {
    mutate(&st, caller, "open_ticket", "ticket", StatusCode::CREATED, |suite, who| {
        let req: NewTicket = serde_json::from_slice(&body).map_err(|e| reject(suite, who, "open_ticket", "ticket", e.into()))?;
        suite.open_ticket(&who.actor(), req)
    })
}

#[derive(Deserialize)]
struct TransitionBody {
    state: String,
    #[serde(default)]
    note: String,
}

async fn patch_ticket(State(st): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let target = format!("ticket {id}");
    mutate(&st, caller, "transition_ticket", &target, StatusCode::OK, |suite, who| {
        let parsed = id
            .parse::<u64>()
            .map_err(|_| SuiteError::bad_request("INVALID_PARAMETER", format!("ticket id {id:?}")))
            .and_then(|n| Ok((n, serde_json::from_slice::<TransitionBody>(&body)?)))
            .and_then(|(n, b)| Ok((n, b.state.parse::<TicketState>()?, b.note)));
        let (n, to, note) = parsed.map_err(|e| reject(suite, who, "transition_ticket", &target, e))?;
        suite.transition_ticket(&who.actor(), n, to, &note)
    })
}

async fn list_tickets(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let state = param(&q, "state").map(str::parse::<TicketState>).transpose()?;
    Ok(Json(tickets_body(&st.read(), state)).into_response())
}

#[derive(Serialize)]
pub struct TicketList {
    pub tickets: Vec<Ticket>,
}

/// Body of the ticket listing, shared with the command line.
pub fn tickets_body(suite: &Suite, state: Option<TicketState>) -> TicketList {
    TicketList { tickets: suite.tickets(state) }
}

async fn good_current(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let date = param(&q, "date")
        .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| SuiteError::bad_request("INVALID_TIME", format!("{d:?} is not YYYY-MM-DD"))))
        .transpose()?;
    Ok(Json(st.read().good(date)?).into_response())
}

async fn suggestions(State(st): State<AppState>) -> ApiResult<Response> {
    Ok(Json(json!({ "suggestions": st.read().suggestions()? })).into_response())
}

async fn console_config(State(st): State<AppState>, caller: Caller) -> ApiResult<Response> {
    let identity = caller.0.ok();
    Ok(Json(json!({
        "api_base": API_BASE,
        "refresh_s": st.0.options.console_refresh_s,
        "version": VERSION,
        "identity": identity,
        "can_mutate": identity.as_ref().is_some_and(|i| !i.is_guest()),
    }))
    .into_response())
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
    store: SubsystemHealth,
    scheduler: SubsystemHealth,
}

async fn healthz(State(st): State<AppState>) -> Response {
    let (store, now) = {
        let suite = st.read();
        (suite.store_health(), suite.now())
    };
    let scheduler = st.0.scheduler.health(now);
    let status = if store.ok && scheduler.ok { "ok" } else { "degraded" };
    let code = if status == "ok" { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(Health { status, version: VERSION, store, scheduler })).into_response()
}
