//! Hierarchical inventory of infrastructures, countries, sites and services.
//!
//! The tree is strictly layered: `ROC -> COUNTRY -> SITE -> SERVICE`. Contacts
//! hang off any node and carry a privilege; certificate subjects map onto
//! contacts. An `ADMIN` contact controls its node and everything beneath it.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Add;
use core::str::FromStr;

use chrono::DateTime;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::time::Timestamp;

pub const ATTR_CPU_COUNT: &str = "cpu_count";
pub const ATTR_STORAGE_TB: &str = "storage_tb";
pub const ATTR_SERVICE_TYPE: &str = "service_type";
pub const ATTR_ENDPOINT: &str = "endpoint";
pub const ATTR_CRITICAL: &str = "critical";
pub const ATTR_MPI: &str = "mpi";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Roc,
    Country,
    Site,
    Service,
}

impl NodeKind {
    pub fn rank(self) -> u8 {
        match self {
            NodeKind::Roc => 0,
            NodeKind::Country => 1,
            NodeKind::Site => 2,
            NodeKind::Service => 3,
        }
    }

    /// The only kind a node of this kind may be attached to.
    pub fn parent_kind(self) -> Option<NodeKind> {
        match self {
            NodeKind::Roc => None,
            NodeKind::Country => Some(NodeKind::Roc),
            NodeKind::Site => Some(NodeKind::Country),
            NodeKind::Service => Some(NodeKind::Site),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Roc => "ROC",
            NodeKind::Country => "COUNTRY",
            NodeKind::Site => "SITE",
            NodeKind::Service => "SERVICE",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    #[default]
    Active,
    Suspended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServiceType {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "sBDII")]
    SBdii,
    #[serde(rename = "WMS")]
    Wms,
    #[serde(rename = "VOMS")]
    Voms,
    #[serde(rename = "LFC")]
    Lfc,
    #[serde(rename = "FTS")]
    Fts,
    #[serde(rename = "MYPROXY")]
    MyProxy,
    #[serde(rename = "OTHER")]
    Other,
}

impl ServiceType {
    pub const ALL: [ServiceType; 9] = [
        ServiceType::Ce,
        ServiceType::Se,
        ServiceType::SBdii,
        ServiceType::Wms,
        ServiceType::Voms,
        ServiceType::Lfc,
        ServiceType::Fts,
        ServiceType::MyProxy,
        ServiceType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceType::Ce => "CE",
            ServiceType::Se => "SE",
            ServiceType::SBdii => "sBDII",
            ServiceType::Wms => "WMS",
            ServiceType::Voms => "VOMS",
            ServiceType::Lfc => "LFC",
            ServiceType::Fts => "FTS",
            ServiceType::MyProxy => "MYPROXY",
            ServiceType::Other => "OTHER",
        }
    }
}

impl FromStr for ServiceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ServiceType::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| invalid_attr(ATTR_SERVICE_TYPE, "unknown service type"))
    }
}

impl fmt::Display for ServiceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Storage capacity in terabytes, held as an exact count of thousandths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StorageTb(u64);

impl StorageTb {
    pub const ZERO: StorageTb = StorageTb(0);

    pub fn from_milli(milli: u64) -> Self {
        StorageTb(milli)
    }

    pub fn milli(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl Add for StorageTb {
    type Output = StorageTb;

    fn add(self, rhs: StorageTb) -> StorageTb {
        StorageTb(self.0 + rhs.0)
    }
}

impl FromStr for StorageTb {
    type Err = Error;

    /// Accepts a non-negative decimal with at most three fraction digits.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid_attr(ATTR_STORAGE_TB, "expected a non-negative decimal");
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 3 || !frac.bytes().all(|b| b.is_ascii_digit()) || (s.contains('.') && frac.is_empty()) {
            return Err(bad());
        }
        let whole: u64 = int.parse().map_err(|_| bad())?;
        let mut milli = 0u64;
        for (i, b) in frac.bytes().enumerate() {
            milli += u64::from(b - b'0') * [100, 10, 1][i];
        }
        whole.checked_mul(1000).and_then(|w| w.checked_add(milli)).map(StorageTb).ok_or_else(bad)
    }
}

impl fmt::Display for StorageTb {
    /// Shortest rendering with at least one fraction digit: `754.2`, `97.0`, `0.125`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 1000;
        let mut frac = self.0 % 1000;
        let mut digits = 3;
        while digits > 1 && frac % 10 == 0 {
            frac /= 10;
            digits -= 1;
        }
        write!(f, "{whole}.{frac:0width$}", width = digits)
    }
}

impl Serialize for StorageTb {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for StorageTb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(serde::de::Error::custom("storage must be a non-negative number"));
        }
        Ok(StorageTb((v * 1000.0 + 0.5) as u64))
    }
}

fn invalid_attr(key: &str, reason: &str) -> Error {
    Error::InvalidAttribute { key: key.to_string(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub name: String,
    pub parent: Option<NodeId>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub status: NodeStatus,
}

impl RegistryNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, name: impl Into<String>, parent: Option<&NodeId>) -> Self {
        RegistryNode {
            id: NodeId::new(id),
            kind,
            name: name.into(),
            parent: parent.cloned(),
            attributes: BTreeMap::new(),
            status: NodeStatus::Active,
        }
    }

    pub fn roc(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self::new(id, NodeKind::Roc, name, None)
    }

    pub fn country(id: impl Into<String>, name: impl Into<String>, roc: &NodeId) -> Self {
        Self::new(id, NodeKind::Country, name, Some(roc))
    }

    pub fn site(id: impl Into<String>, name: impl Into<String>, country: &NodeId, cpus: u64, storage: StorageTb) -> Self {
        Self::new(id, NodeKind::Site, name, Some(country)).with_attr(ATTR_CPU_COUNT, cpus.to_string()).with_attr(ATTR_STORAGE_TB, storage.to_string())
    }

    pub fn service(
        id: impl Into<String>,
        name: impl Into<String>,
        site: &NodeId,
        service_type: ServiceType,
        endpoint: impl Into<String>,
        critical: bool,
    ) -> Self {
        Self::new(id, NodeKind::Service, name, Some(site))
            .with_attr(ATTR_SERVICE_TYPE, service_type.as_str())
            .with_attr(ATTR_ENDPOINT, endpoint)
            .with_attr(ATTR_CRITICAL, if critical { "true" } else { "false" })
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attributes.insert(key.to_string(), value.into());
        self
    }

    pub fn with_status(mut self, status: NodeStatus) -> Self {
        self.status = status;
        self
    }

    pub fn is_active(&self) -> bool {
        self.status == NodeStatus::Active
    }

    pub fn cpu_count(&self) -> Option<u64> {
        self.attributes.get(ATTR_CPU_COUNT)?.parse().ok()
    }

    pub fn storage(&self) -> Option<StorageTb> {
        self.attributes.get(ATTR_STORAGE_TB)?.parse().ok()
    }

    pub fn service_type(&self) -> Option<ServiceType> {
        self.attributes.get(ATTR_SERVICE_TYPE)?.parse().ok()
    }

    pub fn endpoint(&self) -> Option<&str> {
        self.attributes.get(ATTR_ENDPOINT).map(String::as_str)
    }

    pub fn is_critical(&self) -> bool {
        self.attributes.get(ATTR_CRITICAL).map(|v| v == "true").unwrap_or(false)
    }

    pub fn supports_mpi(&self) -> bool {
        self.attributes.get(ATTR_MPI).map(|v| v == "true").unwrap_or(false)
    }

    /// Checks the per-kind attribute schema.
    pub fn validate_attributes(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(invalid_attr("name", "must not be empty"));
        }
        match self.kind {
            NodeKind::Site => {
                let cpus = self.attributes.get(ATTR_CPU_COUNT).ok_or_else(|| invalid_attr(ATTR_CPU_COUNT, "required on sites"))?;
                if cpus.is_empty() || !cpus.bytes().all(|b| b.is_ascii_digit()) || cpus.parse::<u64>().is_err() {
                    return Err(invalid_attr(ATTR_CPU_COUNT, "expected a non-negative integer"));
                }
                let storage = self.attributes.get(ATTR_STORAGE_TB).ok_or_else(|| invalid_attr(ATTR_STORAGE_TB, "required on sites"))?;
                storage.parse::<StorageTb>()?;
                if let Some(mpi) = self.attributes.get(ATTR_MPI) {
                    parse_bool(ATTR_MPI, mpi)?;
                }
            }
            NodeKind::Service => {
                self.attributes
                    .get(ATTR_SERVICE_TYPE)
                    .ok_or_else(|| invalid_attr(ATTR_SERVICE_TYPE, "required on services"))?
                    .parse::<ServiceType>()?;
                let endpoint = self.attributes.get(ATTR_ENDPOINT).ok_or_else(|| invalid_attr(ATTR_ENDPOINT, "required on services"))?;
                validate_endpoint(endpoint)?;
                let critical = self.attributes.get(ATTR_CRITICAL).ok_or_else(|| invalid_attr(ATTR_CRITICAL, "required on services"))?;
                parse_bool(ATTR_CRITICAL, critical)?;
            }
            NodeKind::Roc | NodeKind::Country => {}
        }
        Ok(())
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid_attr(key, "expected true or false")),
    }
}

fn validate_endpoint(endpoint: &str) -> Result<()> {
    let bad = || invalid_attr(ATTR_ENDPOINT, "expected host:port");
    let (host, port) = endpoint.rsplit_once(':').ok_or_else(bad)?;
    let host_ok = !host.is_empty() && host.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_');
    let port_ok = !port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()) && port.parse::<u16>().is_ok();
    if host_ok && port_ok {
        Ok(())
    } else {
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Privilege {
    Viewer,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactId(String);

impl ContactId {
    pub fn new(id: impl Into<String>) -> Self {
        ContactId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub id: ContactId,
    pub name: String,
    pub email: String,
    #[serde(default)]
    pub phone: String,
    pub node: NodeId,
    pub privilege: Privilege,
}

/// Syntactic e-mail check: one `@`, non-empty local part, dotted domain, no whitespace.
pub fn is_valid_email(email: &str) -> bool {
    let Some((local, domain)) = email.split_once('@') else {
        return false;
    };
    !local.is_empty()
        && !domain.contains('@')
        && !email.chars().any(char::is_whitespace)
        && domain.split('.').count() >= 2
        && domain.split('.').all(|label| !label.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertIdentity {
    pub subject_dn: String,
    pub mapped_contact: ContactId,
}

/// Normalizes an X.509 distinguished name to RFC 2253 form.
///
/// Both the comma-separated form (`CN=a, O=b, C=RS`) and the OpenSSL slash form
/// (`/C=RS/O=b/CN=a`, most significant RDN first) are accepted. Attribute types
/// are upper-cased and whitespace around separators is dropped; values keep
/// their case.
pub fn normalize_dn(dn: &str) -> String {
    let dn = dn.trim();
    let rdns: Vec<String> = if let Some(rest) = dn.strip_prefix('/') {
        let mut parts: Vec<String> = split_unescaped(rest, &['/']).into_iter().filter(|p| !p.trim().is_empty()).collect();
        parts.reverse();
        parts
    } else {
        split_unescaped(dn, &[',', ';'])
    };
    let mut out = String::new();
    for (i, rdn) in rdns.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        for (j, ava) in split_unescaped(rdn, &['+']).iter().enumerate() {
            if j > 0 {
                out.push('+');
            }
            match ava.split_once('=') {
                Some((ty, value)) => {
                    out.push_str(&ty.trim().to_ascii_uppercase());
                    out.push('=');
                    out.push_str(value.trim());
                }
                None => out.push_str(ava.trim()),
            }
        }
    }
    out
}

fn split_unescaped(s: &str, seps: &[char]) -> Vec<String> {
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut escaped = false;
    for c in s.chars() {
        if escaped {
            cur.push(c);
            escaped = false;
        } else if c == '\\' {
            cur.push(c);
            escaped = true;
        } else if seps.contains(&c) {
            parts.push(core::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    parts.push(cur);
    parts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    View,
    Edit,
    Admin,
}

/// Who performs a mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Actor {
    /// Local operator with direct store access (CLI import, fixtures, journal replay).
    Operator,
    /// Holder of a certificate with the given subject DN.
    Subject(String),
}

impl Actor {
    pub fn subject(dn: impl AsRef<str>) -> Self {
        Actor::Subject(normalize_dn(dn.as_ref()))
    }

    pub fn dn(&self) -> Option<&str> {
        match self {
            Actor::Operator => None,
            Actor::Subject(dn) => Some(dn),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceTotals {
    pub cpu_total: u64,
    pub storage_tb_total: StorageTb,
    pub site_count: u64,
}

impl Add for ResourceTotals {
    type Output = ResourceTotals;

    fn add(self, rhs: Self) -> Self {
        ResourceTotals {
            cpu_total: self.cpu_total + rhs.cpu_total,
            storage_tb_total: self.storage_tb_total + rhs.storage_tb_total,
            site_count: self.site_count + rhs.site_count,
        }
    }
}

/// Subtree export used for synchronization with dependent services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub version: u64,
    pub generated_at: Timestamp,
    pub nodes: Vec<RegistryNode>,
}

impl TopologySnapshot {
    pub fn node(&self, id: &NodeId) -> Option<&RegistryNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    /// Index of the snapshot's nodes by id.
    pub fn index(&self) -> BTreeMap<&NodeId, &RegistryNode> {
        self.nodes.iter().map(|n| (&n.id, n)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RegistryState", into = "RegistryState")]
pub struct Registry {
    nodes: BTreeMap<NodeId, RegistryNode>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    contacts: BTreeMap<ContactId, Contact>,
    identities: BTreeMap<String, CertIdentity>,
    version: u64,
    updated_at: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct RegistryState {
    version: u64,
    updated_at: Timestamp,
    nodes: Vec<RegistryNode>,
    contacts: Vec<Contact>,
    identities: Vec<CertIdentity>,
}

impl From<Registry> for RegistryState {
    fn from(r: Registry) -> Self {
        let mut nodes: Vec<RegistryNode> = r.nodes.into_values().collect();
        nodes.sort_by(|a, b| a.kind.rank().cmp(&b.kind.rank()).then_with(|| a.id.cmp(&b.id)));
        RegistryState {
            version: r.version,
            updated_at: r.updated_at,
            nodes,
            contacts: r.contacts.into_values().collect(),
            identities: r.identities.into_values().collect(),
        }
    }
}

impl TryFrom<RegistryState> for Registry {
    type Error = Error;

    fn try_from(state: RegistryState) -> Result<Self> {
        let mut reg = Registry::new();
        let mut nodes = state.nodes;
        nodes.sort_by_key(|n| n.kind.rank());
        for node in nodes {
            reg.validate_placement(&node)?;
            reg.insert_unchecked(node);
        }
        for contact in state.contacts {
            reg.validate_contact(&contact)?;
            reg.contacts.insert(contact.id.clone(), contact);
        }
        for identity in state.identities {
            if !reg.contacts.contains_key(&identity.mapped_contact) {
                return Err(Error::InvalidContact(identity.mapped_contact.to_string()));
            }
            reg.identities.insert(identity.subject_dn.clone(), identity);
        }
        reg.version = state.version;
        reg.updated_at = state.updated_at;
        Ok(reg)
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new()
    }
}

impl Registry {
    pub fn new() -> Self {
        Registry {
            nodes: BTreeMap::new(),
            children: BTreeMap::new(),
            contacts: BTreeMap::new(),
            identities: BTreeMap::new(),
            version: 0,
            updated_at: DateTime::UNIX_EPOCH,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn updated_at(&self) -> Timestamp {
        self.updated_at
    }

    pub fn get(&self, id: &NodeId) -> Option<&RegistryNode> {
        self.nodes.get(id)
    }

    pub fn node(&self, id: &NodeId) -> Result<&RegistryNode> {
        self.nodes.get(id).ok_or_else(|| Error::UnknownNode(id.clone()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &RegistryNode> {
        self.nodes.values()
    }

    pub fn roots(&self) -> impl Iterator<Item = &RegistryNode> {
        self.nodes.values().filter(|n| n.parent.is_none())
    }

    pub fn children(&self, id: &NodeId) -> impl Iterator<Item = &RegistryNode> {
        self.children.get(id).into_iter().flatten().filter_map(|c| self.nodes.get(c))
    }

    /// `id` followed by its ancestors up to the root.
    pub fn ancestors_or_self(&self, id: &NodeId) -> Vec<&RegistryNode> {
        let mut chain = Vec::new();
        let mut cur = self.nodes.get(id);
        while let Some(node) = cur {
            chain.push(node);
            cur = node.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        chain
    }

    /// Pre-order walk of the subtree rooted at `id` (including `id`).
    pub fn subtree(&self, id: &NodeId) -> Vec<&RegistryNode> {
        let mut out = Vec::new();
        let mut stack: Vec<&NodeId> = Vec::new();
        if self.nodes.contains_key(id) {
            stack.push(id);
        }
        while let Some(cur) = stack.pop() {
            out.push(&self.nodes[cur]);
            if let Some(kids) = self.children.get(cur) {
                stack.extend(kids.iter().rev());
            }
        }
        out
    }

    /// SITE nodes in the subtree of `scope`, active or not.
    pub fn sites_under(&self, scope: &NodeId) -> Vec<&RegistryNode> {
        self.subtree(scope).into_iter().filter(|n| n.kind == NodeKind::Site).collect()
    }

    pub fn services_of(&self, site: &NodeId) -> impl Iterator<Item = &RegistryNode> {
        self.children(site).filter(|n| n.kind == NodeKind::Service)
    }

    /// Nearest ancestor-or-self of the given kind.
    pub fn ancestor_of_kind(&self, id: &NodeId, kind: NodeKind) -> Option<&RegistryNode> {
        self.ancestors_or_self(id).into_iter().find(|n| n.kind == kind)
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.contacts.values()
    }

    pub fn contact(&self, id: &ContactId) -> Option<&Contact> {
        self.contacts.get(id)
    }

    pub fn contacts_at(&self, node: &NodeId) -> impl Iterator<Item = &Contact> {
        let node = node.clone();
        self.contacts.values().filter(move |c| c.node == node)
    }

    pub fn identities(&self) -> impl Iterator<Item = &CertIdentity> {
        self.identities.values()
    }

    /// Contact mapped to a certificate subject (any DN form accepted).
    pub fn resolve(&self, dn: &str) -> Option<&Contact> {
        let identity = self.identities.get(&normalize_dn(dn))?;
        self.contacts.get(&identity.mapped_contact)
    }

    fn bump(&mut self, now: Timestamp) {
        self.version += 1;
        if now > self.updated_at {
            self.updated_at = now;
        }
    }

    fn validate_placement(&self, node: &RegistryNode) -> Result<()> {
        node.validate_attributes()?;
        match (node.kind.parent_kind(), &node.parent) {
            (None, None) => {}
            (None, Some(_)) => return Err(Error::HierarchyViolation("ROC nodes have no parent".to_string())),
            (Some(kind), None) => return Err(Error::HierarchyViolation(alloc::format!("{} requires a {} parent", node.kind, kind))),
            (Some(kind), Some(parent)) => {
                let p = self.nodes.get(parent).ok_or_else(|| Error::UnknownNode(parent.clone()))?;
                if p.kind != kind {
                    return Err(Error::HierarchyViolation(alloc::format!("{} cannot be placed under {}", node.kind, p.kind)));
                }
            }
        }
        if let Some(existing) = self.nodes.get(&node.id) {
            if existing.kind != node.kind {
                return Err(Error::HierarchyViolation("node kind is immutable".to_string()));
            }
        }
        let siblings: alloc::boxed::Box<dyn Iterator<Item = &RegistryNode>> = match &node.parent {
            Some(p) => alloc::boxed::Box::new(self.children(p)),
            None => alloc::boxed::Box::new(self.roots()),
        };
        for sib in siblings {
            if sib.id != node.id && sib.name == node.name {
                return Err(Error::DuplicateSiblingName(node.name.clone()));
            }
        }
        Ok(())
    }

    fn insert_unchecked(&mut self, node: RegistryNode) {
        if let Some(old) = self.nodes.get(&node.id) {
            if let Some(old_parent) = old.parent.clone() {
                if let Some(set) = self.children.get_mut(&old_parent) {
                    set.remove(&node.id);
                }
            }
        }
        if let Some(parent) = &node.parent {
            self.children.entry(parent.clone()).or_default().insert(node.id.clone());
        }
        self.nodes.insert(node.id.clone(), node);
    }

    fn authorize_node_edit(&self, actor: &Actor, node: &RegistryNode) -> Result<()> {
        let Actor::Subject(dn) = actor else {
            return Ok(());
        };
        let allowed = match self.nodes.get(&node.id) {
            Some(existing) => {
                // Updates in place need EDIT on the node; a move needs EDIT on both parents.
                let mut ok = self.check_authz(dn, Action::Edit, &existing.id)?;
                if existing.parent != node.parent {
                    if let Some(p) = &node.parent {
                        ok = ok && self.check_authz(dn, Action::Edit, p)?;
                    }
                }
                ok
            }
            None => match &node.parent {
                Some(parent) if self.nodes.contains_key(parent) => self.check_authz(dn, Action::Edit, parent)?,
                // Placement validation reports the missing parent.
                Some(_) => true,
                // New infrastructures: only an administrator of an existing ROC.
                None => {
                    let rocs: Vec<NodeId> = self.roots().map(|r| r.id.clone()).collect();
                    let mut ok = false;
                    for roc in &rocs {
                        ok |= self.check_authz(dn, Action::Admin, roc)?;
                    }
                    ok
                }
            },
        };
        if allowed {
            Ok(())
        } else {
            Err(Error::AuthzDenied)
        }
    }

    /// Inserts or replaces a node after authorization and hierarchy checks.
    pub fn upsert_node(&mut self, actor: &Actor, node: RegistryNode, now: Timestamp) -> Result<NodeId> {
        self.authorize_node_edit(actor, &node)?;
        self.validate_placement(&node)?;
        let id = node.id.clone();
        self.insert_unchecked(node);
        self.bump(now);
        Ok(id)
    }

    fn validate_contact(&self, contact: &Contact) -> Result<()> {
        if !self.nodes.contains_key(&contact.node) {
            return Err(Error::UnknownNode(contact.node.clone()));
        }
        if contact.name.trim().is_empty() {
            return Err(Error::InvalidContact("name must not be empty".to_string()));
        }
        if !is_valid_email(&contact.email) {
            return Err(Error::InvalidContact(alloc::format!("invalid e-mail {:?}", contact.email)));
        }
        Ok(())
    }

    /// Whether `dn` may manage contacts of `privilege` attached to `node`.
    ///
    /// Administrators are managed from strictly higher levels; viewers from the
    /// same level or above.
    fn may_manage_contact(&self, dn: &str, node: &NodeId, privilege: Privilege) -> Result<bool> {
        let Some(contact) = self.resolve(dn) else {
            return Err(Error::UnknownIdentity(dn.to_string()));
        };
        if contact.privilege != Privilege::Admin {
            return Ok(false);
        }
        let chain = self.ancestors_or_self(node);
        let mut scope = chain.iter();
        if privilege == Privilege::Admin {
            scope.next();
        }
        Ok(scope.any(|n| n.id == contact.node))
    }

    pub fn upsert_contact(&mut self, actor: &Actor, contact: Contact, now: Timestamp) -> Result<ContactId> {
        self.validate_contact(&contact)?;
        if let Actor::Subject(dn) = actor {
            let mut ok = self.may_manage_contact(dn, &contact.node, contact.privilege)?;
            if let Some(old) = self.contacts.get(&contact.id) {
                ok = ok && self.may_manage_contact(dn, &old.node, old.privilege)?;
            }
            if !ok {
                return Err(Error::AuthzDenied);
            }
        }
        let id = contact.id.clone();
        self.contacts.insert(id.clone(), contact);
        self.bump(now);
        Ok(id)
    }

    /// Maps a certificate subject onto an existing contact.
    pub fn map_identity(&mut self, actor: &Actor, subject_dn: &str, contact: &ContactId, now: Timestamp) -> Result<()> {
        let target = self.contacts.get(contact).ok_or_else(|| Error::InvalidContact(contact.to_string()))?.clone();
        let dn = normalize_dn(subject_dn);
        if dn.is_empty() {
            return Err(Error::InvalidContact("empty subject".to_string()));
        }
        if let Some(existing) = self.identities.get(&dn) {
            if &existing.mapped_contact != contact {
                return Err(Error::DuplicateIdentity(dn));
            }
        }
        if let Actor::Subject(actor_dn) = actor {
            if !self.may_manage_contact(actor_dn, &target.node, target.privilege)? {
                return Err(Error::AuthzDenied);
            }
        }
        self.identities.insert(dn.clone(), CertIdentity { subject_dn: dn, mapped_contact: contact.clone() });
        self.bump(now);
        Ok(())
    }

    /// Whether the certificate subject may perform `action` on `node`.
    ///
    /// Any mapped subject may view. EDIT and ADMIN require an ADMIN contact
    /// attached to `node` or one of its ancestors.
    pub fn check_authz(&self, dn: &str, action: Action, node: &NodeId) -> Result<bool> {
        let contact = self.resolve(dn).ok_or_else(|| Error::UnknownIdentity(normalize_dn(dn)))?;
        if !self.nodes.contains_key(node) {
            return Err(Error::UnknownNode(node.clone()));
        }
        if action == Action::View {
            return Ok(true);
        }
        if contact.privilege != Privilege::Admin {
            return Ok(false);
        }
        Ok(self.ancestors_or_self(node).iter().any(|n| n.id == contact.node))
    }

    /// Sums capacity over the ACTIVE sites in the subtree of `scope`.
    pub fn resource_summary(&self, scope: &NodeId) -> Result<ResourceTotals> {
        self.node(scope)?;
        Ok(self
            .sites_under(scope)
            .into_iter()
            .filter(|s| s.is_active())
            .map(|s| ResourceTotals {
                cpu_total: s.cpu_count().unwrap_or(0),
                storage_tb_total: s.storage().unwrap_or(StorageTb::ZERO),
                site_count: 1,
            })
            .fold(ResourceTotals::default(), Add::add))
    }

    /// Subtree of `scope`, ordered by `(kind rank, name, id)`.
    ///
    /// `generated_at` is the time of the last mutation, so repeated exports
    /// without intervening mutations are identical.
    pub fn export_topology(&self, scope: &NodeId) -> Result<TopologySnapshot> {
        self.node(scope)?;
        let mut nodes: Vec<RegistryNode> = self.subtree(scope).into_iter().cloned().collect();
        nodes.sort_by(|a, b| a.kind.rank().cmp(&b.kind.rank()).then_with(|| a.name.cmp(&b.name)).then_with(|| a.id.cmp(&b.id)));
        Ok(TopologySnapshot { version: self.version, generated_at: self.updated_at, nodes })
    }

    /// Upserts every node of a snapshot as the local operator.
    ///
    /// Nodes whose parent lies outside the snapshot must already exist here.
    pub fn import_topology(&mut self, snapshot: &TopologySnapshot, now: Timestamp) -> Result<usize> {
        let mut nodes: Vec<&RegistryNode> = snapshot.nodes.iter().collect();
        nodes.sort_by_key(|n| n.kind.rank());
        let mut staged = self.clone();
        for node in &nodes {
            staged.upsert_node(&Actor::Operator, (*node).clone(), now)?;
        }
        *self = staged;
        Ok(nodes.len())
    }

    /// ADMIN contacts attached directly to `node`, ordered by contact id.
    pub fn admins_at(&self, node: &NodeId) -> Vec<&Contact> {
        self.contacts_at(node).filter(|c| c.privilege == Privilege::Admin).collect()
    }
}
