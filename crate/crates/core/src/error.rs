use alloc::string::String;

use crate::registry::NodeId;

/// Failure of a domain operation.
///
/// Every variant maps onto a stable upper-case code via [`Error::code`], which is
/// what the HTTP API and the CLI report to callers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("actor is not authorized for this action")]
    AuthzDenied,
    #[error("hierarchy violation: {0}")]
    HierarchyViolation(String),
    #[error("a sibling named {0:?} already exists")]
    DuplicateSiblingName(String),
    #[error("no contact mapped to subject {0:?}")]
    UnknownIdentity(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid attribute {key}: {reason}")]
    InvalidAttribute { key: String, reason: String },
    #[error("invalid contact: {0}")]
    InvalidContact(String),
    #[error("subject {0:?} is already mapped")]
    DuplicateIdentity(String),

    #[error("unknown service {0}")]
    UnknownService(NodeId),
    #[error("timestamp lies in the future")]
    FutureTimestamp,
    #[error("detail payload exceeds {limit} bytes")]
    PayloadTooLarge { limit: usize },
    #[error("unknown site {0}")]
    UnknownSite(NodeId),
    #[error("site {0} does not advertise MPI support")]
    MpiNotSupported(NodeId),
    #[error("invalid probe definition: {0}")]
    InvalidProbe(String),

    #[error("empty window")]
    EmptyWindow,
    #[error("results are not sorted by timestamp")]
    UnsortedResults,
    #[error("site {0} has no critical services")]
    NoCriticalServices(NodeId),
    #[error("no availability figure for site {0}")]
    MissingSiteFigure(NodeId),
    #[error("invalid quarter: {0}")]
    InvalidQuarter(String),

    #[error("row and column dimensions must differ")]
    InvalidDims,
    #[error("capacity must be positive")]
    ZeroCapacity,

    #[error("missing metric {0}")]
    MissingMetric(String),
    #[error("metric {metric} out of range: {value}")]
    OutOfRange { metric: String, value: String },
    #[error("unknown WMS {0}")]
    UnknownWms(NodeId),
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("duplicate timestamp for {0}")]
    DuplicateTimestamp(NodeId),
    #[error("invalid alarm rule: {0}")]
    InvalidRule(String),

    #[error("date precedes the rota epoch")]
    DateBeforeEpoch,
    #[error("invalid rota: {0}")]
    InvalidRota(String),
    #[error("site {0} has no administrative contact")]
    NoSiteContact(NodeId),
    #[error("illegal transition from {from} to {to}")]
    IllegalTransition { from: String, to: String },
    #[error("unknown ticket {0}")]
    UnknownTicket(u64),
    #[error("timestamp precedes the last recorded event")]
    NonMonotoneTime,
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::AuthzDenied => "AUTHZ_DENIED",
            Error::HierarchyViolation(_) => "HIERARCHY_VIOLATION",
            Error::DuplicateSiblingName(_) => "DUPLICATE_SIBLING_NAME",
            Error::UnknownIdentity(_) => "UNKNOWN_IDENTITY",
            Error::UnknownNode(_) => "UNKNOWN_NODE",
            Error::InvalidAttribute { .. } => "INVALID_ATTRIBUTE",
            Error::InvalidContact(_) => "INVALID_CONTACT",
            Error::DuplicateIdentity(_) => "DUPLICATE_IDENTITY",
            Error::UnknownService(_) => "UNKNOWN_SERVICE",
            Error::FutureTimestamp => "FUTURE_TIMESTAMP",
            Error::PayloadTooLarge { .. } => "PAYLOAD_TOO_LARGE",
            Error::UnknownSite(_) => "UNKNOWN_SITE",
            Error::MpiNotSupported(_) => "MPI_NOT_SUPPORTED",
            Error::InvalidProbe(_) => "INVALID_PROBE",
            Error::EmptyWindow => "EMPTY_WINDOW",
            Error::UnsortedResults => "UNSORTED_RESULTS",
            Error::NoCriticalServices(_) => "NO_CRITICAL_SERVICES",
            Error::MissingSiteFigure(_) => "MISSING_SITE_FIGURE",
            Error::InvalidQuarter(_) => "INVALID_QUARTER",
            Error::InvalidDims => "INVALID_DIMS",
            Error::ZeroCapacity => "ZERO_CAPACITY",
            Error::MissingMetric(_) => "MISSING_METRIC",
            Error::OutOfRange { .. } => "OUT_OF_RANGE",
            Error::UnknownWms(_) => "UNKNOWN_WMS",
            Error::UnknownMetric(_) => "UNKNOWN_METRIC",
            Error::DuplicateTimestamp(_) => "DUPLICATE_TIMESTAMP",
            Error::InvalidRule(_) => "INVALID_RULE",
            Error::DateBeforeEpoch => "DATE_BEFORE_EPOCH",
            Error::InvalidRota(_) => "INVALID_ROTA",
            Error::NoSiteContact(_) => "NO_SITE_CONTACT",
            Error::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            Error::UnknownTicket(_) => "UNKNOWN_TICKET",
            Error::NonMonotoneTime => "NON_MONOTONE_TIME",
        }
    }

    /// Whether the failure is attributable to caller input (as opposed to
    /// missing permissions).
    pub fn is_authz(&self) -> bool {
        matches!(self, Error::AuthzDenied | Error::UnknownIdentity(_))
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
