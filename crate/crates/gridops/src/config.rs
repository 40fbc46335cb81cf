//! TOML configuration.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gridops_core::probe::{DEFAULT_PARALLELISM, DEFAULT_PERIOD_MIN};
use gridops_core::sla::{default_quarter_epoch, DEFAULT_SLA_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::error::SuiteError;

pub const CONFIG_ENV: &str = "GRIDOPS_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "gridops.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerConfig,
    pub sla: SlaConfig,
    pub probes: ProbesConfig,
    pub alarms: AlarmsConfig,
    pub store: StoreConfig,
    pub operations: OperationsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    pub tls_cert: Option<PathBuf>,
    pub tls_key: Option<PathBuf>,
    /// CA bundle used to verify client certificates.
    pub tls_client_ca: Option<PathBuf>,
    /// Header carrying the client DN from a terminating proxy. Unset disables it.
    pub trusted_proxy_header: Option<String>,
    pub console_dir: Option<PathBuf>,
    pub console_refresh_s: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:8443".to_string(),
            tls_cert: None,
            tls_key: None,
            tls_client_ca: None,
            trusted_proxy_header: None,
            console_dir: None,
            console_refresh_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlaConfig {
    pub threshold: f64,
    pub quarter_epoch: NaiveDate,
}

impl Default for SlaConfig {
    fn default() -> Self {
        SlaConfig { threshold: DEFAULT_SLA_THRESHOLD, quarter_epoch: default_quarter_epoch() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbesConfig {
    pub parallelism: usize,
    pub default_period_min: u32,
    /// Runs the probe scheduler inside `serve`; probes check that service endpoints accept TCP connections.
    pub enabled: bool,
    pub tick_s: u64,
}

impl Default for ProbesConfig {
    fn default() -> Self {
        ProbesConfig { parallelism: DEFAULT_PARALLELISM, default_period_min: DEFAULT_PERIOD_MIN, enabled: false, tick_s: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlarmsConfig {
    /// JSON or TOML file with the alarm rules.
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub data_dir: PathBuf,
    /// Journal records per namespace before compaction into a snapshot.
    pub snapshot_every: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { data_dir: PathBuf::from("gridops-data"), snapshot_every: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperationsConfig {
    /// JSON file with `countries` and `epoch_week_start`.
    pub rota: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, SuiteError> {
        let cfg: Config = toml::from_str(text).map_err(|e| SuiteError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, SuiteError> {
        let text = std::fs::read_to_string(path).map_err(|e| SuiteError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Config::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    /// Explicit path, then `GRIDOPS_CONFIG`, then `./gridops.toml`, then defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Config, SuiteError> {
        if let Some(p) = explicit {
            return Config::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Config::load(Path::new(&p));
        }
        let local = Path::new(DEFAULT_CONFIG_FILE);
        if local.is_file() {
            return Config::load(local);
        }
        Ok(Config::default())
    }

    fn validate(&self) -> Result<(), SuiteError> {
        if !(0.0..=1.0).contains(&self.sla.threshold) {
            return Err(SuiteError::Config("sla.threshold must lie in [0, 1]".to_string()));
        }
        if self.probes.parallelism == 0 {
            return Err(SuiteError::Config("probes.parallelism must be positive".to_string()));
        }
        if self.probes.default_period_min == 0 || self.probes.tick_s == 0 {
            return Err(SuiteError::Config("probe period and tick must be positive".to_string()));
        }
        if self.server.tls_cert.is_some() != self.server.tls_key.is_some() {
            return Err(SuiteError::Config("tls_cert and tls_key go together".to_string()));
        }
        Ok(())
    }

    /// Paths in a config file are relative to the file.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.server.tls_cert.as_mut(),
            self.server.tls_key.as_mut(),
            self.server.tls_client_ca.as_mut(),
            self.server.console_dir.as_mut(),
            self.alarms.rules.as_mut(),
            self.operations.rota.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.store.data_dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::parse(
            r#"
            [server]
            listen = "0.0.0.0:9000"
            trusted_proxy_header = "X-Client-DN"
            [sla]
            threshold = 0.9
            quarter_epoch = "2008-05-01"
            [probes]
            parallelism = 4
            default_period_min = 15
            [alarms]
            rules = "/etc/gridops/alarms.json"
            [store]
            data_dir = "/var/lib/gridops"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.server.trusted_proxy_header.as_deref(), Some("X-Client-DN"));
        assert_eq!(cfg.sla.threshold, 0.9);
        assert_eq!(cfg.probes.parallelism, 4);
        assert_eq!(cfg.store.data_dir, PathBuf::from("/var/lib/gridops"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Config::parse("[sla]\nthreshold = 1.5").is_err());
        assert!(Config::parse("[probes]\nparallelism = 0").is_err());
        assert!(Config::parse("[nope]\nx = 1").is_err());
    }
}
