//! Caller identity from a verified client certificate or a trusted proxy header.

use gridops_core::registry::{normalize_dn, Actor, ContactId, Registry};
use serde::{Deserialize, Serialize};

use crate::error::SuiteError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IdentitySource {
    MutualTls,
    TrustedHeader,
}

/// Subject DN of the verified client certificate of a TLS connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerDn(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiIdentity {
    pub subject_dn: String,
    pub source: IdentitySource,
    /// Mapped contact; `None` for a guest with view access only.
    pub resolved: Option<ContactId>,
}

impl ApiIdentity {
    pub fn actor(&self) -> Actor {
        Actor::Subject(self.subject_dn.clone())
    }

    pub fn is_guest(&self) -> bool {
        self.resolved.is_none()
    }
}

/// Resolves the caller. The header is consulted only when `trusted_header`
/// is enabled and no certificate was presented.
pub fn authenticate(peer: Option<&PeerDn>, header: Option<&str>, trusted_header: bool, registry: &Registry) -> Result<ApiIdentity, SuiteError> {
    let (dn, source) = match (peer, header) {
        (Some(p), _) => (p.0.as_str(), IdentitySource::MutualTls),
        (None, Some(h)) if trusted_header && !h.trim().is_empty() => (h, IdentitySource::TrustedHeader),
        _ => return Err(SuiteError::Unauthenticated),
    };
    let subject_dn = normalize_dn(dn);
    let resolved = registry.resolve(&subject_dn).map(|c| c.id.clone());
    Ok(ApiIdentity { subject_dn, source, resolved })
}
