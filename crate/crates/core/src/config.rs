//! Runtime and orchestrator configuration.
//!
//! The orchestrator reads an administrator file in TOML; node runtimes are
//! configured in code with environment overrides (`RPCOOL_POOL_DIR`,
//! `RPCOOL_ORCH`, `RPCOOL_SANDBOX_MODE`, `RPCOOL_FALLBACK_LISTEN`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::ids::HolderId;

pub const DEFAULT_POOL_BASE: u64 = 0x7C00_0000_0000;
pub const DEFAULT_POOL_SPAN: u64 = 1 << 40;
pub const DEFAULT_QUOTA: u64 = 256 << 20;
pub const DEFAULT_ORCH_ENDPOINT: &str = "127.0.0.1:7470";
pub const DEFAULT_POOL_DIR: &str = "/dev/shm/rpcool";

pub const ENV_ORCH: &str = "RPCOOL_ORCH";
pub const ENV_POOL_DIR: &str = "RPCOOL_POOL_DIR";
pub const ENV_SANDBOX_MODE: &str = "RPCOOL_SANDBOX_MODE";
pub const ENV_FALLBACK_LISTEN: &str = "RPCOOL_FALLBACK_LISTEN";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed admin config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Orchestrator policy: address pool, quotas and lease timing.
#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub page_size: u64,
    pub pool_base: u64,
    pub pool_span: u64,
    pub default_quota: u64,
    /// Per-node (`"3"`) or per-process (`"3/4711"`) quota overrides.
    pub quota_overrides: HashMap<String, u64>,
    /// How often holders renew; the lease term is this times `missed_renewals`.
    pub renew_interval: Duration,
    pub missed_renewals: u32,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            page_size: 4096,
            pool_base: DEFAULT_POOL_BASE,
            pool_span: DEFAULT_POOL_SPAN,
            default_quota: DEFAULT_QUOTA,
            quota_overrides: HashMap::new(),
            renew_interval: Duration::from_secs(1),
            missed_renewals: 3,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdminFile {
    page_size: Option<u64>,
    pool_base: Option<u64>,
    pool_span: Option<u64>,
    default_quota: Option<u64>,
    lease_renew_ms: Option<u64>,
    lease_missed_renewals: Option<u32>,
    #[serde(default)]
    quota: HashMap<String, u64>,
}

impl OrchestratorConfig {
    pub fn lease_term(&self) -> Duration {
        self.renew_interval * self.missed_renewals
    }

    pub fn quota_for(&self, holder: HolderId) -> u64 {
        let by_process = format!("{}/{}", holder.node, holder.pid);
        if let Some(q) = self.quota_overrides.get(&by_process) {
            return *q;
        }
        self.quota_overrides
            .get(&holder.node.to_string())
            .copied()
            .unwrap_or(self.default_quota)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: AdminFile = toml::from_str(text)?;
        let mut cfg = Self::default();
        if let Some(v) = file.page_size {
            cfg.page_size = v;
        }
        if let Some(v) = file.pool_base {
            cfg.pool_base = v;
        }
        if let Some(v) = file.pool_span {
            cfg.pool_span = v;
        }
        if let Some(v) = file.default_quota {
            cfg.default_quota = v;
        }
        if let Some(v) = file.lease_renew_ms {
            cfg.renew_interval = Duration::from_millis(v);
        }
        if let Some(v) = file.lease_missed_renewals {
            cfg.missed_renewals = v;
        }
        cfg.quota_overrides = file.quota;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.page_size.is_power_of_two() {
            return Err(ConfigError::Invalid("page_size must be a power of two".into()));
        }
        if self.pool_base % self.page_size != 0 || self.pool_span % self.page_size != 0 {
            return Err(ConfigError::Invalid(
                "pool range must be page aligned".into(),
            ));
        }
        if self.pool_span == 0 || self.default_quota == 0 {
            return Err(ConfigError::Invalid(
                "pool span and default quota must be positive".into(),
            ));
        }
        if self.renew_interval.is_zero() || self.missed_renewals == 0 {
            return Err(ConfigError::Invalid("lease timing must be positive".into()));
        }
        Ok(())
    }
}

/// Which mechanism confines sandboxed threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxMode {
    /// Use protection keys when the CPU and kernel support them.
    Auto,
    /// Per-thread protection keys.
    Hardware,
    /// Process-wide page permission changes.
    Portable,
}

impl std::str::FromStr for SandboxMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "hardware" | "pkey" | "mpk" => Ok(Self::Hardware),
            "portable" | "mprotect" => Ok(Self::Portable),
            other => Err(ConfigError::Invalid(format!("unknown sandbox mode {other:?}"))),
        }
    }
}

/// Adaptive busy-wait thresholds and sleeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusyWaitConfig {
    pub low_load: f64,
    pub high_load: f64,
    pub sleep_low: Duration,
    pub sleep_mid: Duration,
    pub sleep_high: Duration,
    /// Window over which process CPU load is measured.
    pub window: Duration,
}

impl Default for BusyWaitConfig {
    fn default() -> Self {
        Self {
            low_load: 0.25,
            high_load: 0.50,
            sleep_low: Duration::ZERO,
            sleep_mid: Duration::from_micros(5),
            sleep_high: Duration::from_micros(150),
            window: Duration::from_millis(100),
        }
    }
}

/// Protection-key budget: `total = reserved + cached`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBudgetConfig {
    pub total: u32,
    pub reserved: u32,
    pub cached: u32,
}

impl Default for KeyBudgetConfig {
    fn default() -> Self {
        Self {
            total: 16,
            reserved: 2,
            cached: 14,
        }
    }
}

/// Per-node runtime configuration.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub node_id: u32,
    pub page_size: usize,
    /// Directory holding heap backing files.
    pub pool_dir: PathBuf,
    /// Identity of the shared pool this node can map, or `None` when the node
    /// has no shared-memory access and must use the fallback transport.
    pub pool_id: Option<String>,
    pub keys: KeyBudgetConfig,
    pub batch_release_threshold: usize,
    pub busy_wait: BusyWaitConfig,
    pub renew_interval: Duration,
    pub sandbox_mode: SandboxMode,
    pub seal_ring_capacity: u32,
    pub message_ring_capacity: u32,
    pub arena_size: usize,
    pub workers: usize,
    pub fallback_listen: Option<String>,
}

pub fn host_page_size() -> usize {
    // SAFETY: sysconf has no memory-safety preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as usize
    } else {
        4096
    }
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        let pool_dir = PathBuf::from(DEFAULT_POOL_DIR);
        Self {
            node_id: 0,
            page_size: host_page_size(),
            pool_id: Some(pool_dir.display().to_string()),
            pool_dir,
            keys: KeyBudgetConfig::default(),
            batch_release_threshold: 1024,
            busy_wait: BusyWaitConfig::default(),
            renew_interval: Duration::from_secs(1),
            sandbox_mode: SandboxMode::Auto,
            seal_ring_capacity: 4096,
            message_ring_capacity: 1024,
            arena_size: 1 << 20,
            workers: 1,
            fallback_listen: None,
        }
    }
}

impl RuntimeConfig {
    /// Defaults overridden by the `RPCOOL_*` environment variables.
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Ok(dir) = std::env::var(ENV_POOL_DIR) {
            cfg = cfg.with_pool_dir(dir);
        }
        if let Ok(mode) = std::env::var(ENV_SANDBOX_MODE) {
            cfg.sandbox_mode = mode.parse()?;
        }
        if let Ok(addr) = std::env::var(ENV_FALLBACK_LISTEN) {
            cfg.fallback_listen = Some(addr);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_pool_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.pool_dir = dir.into();
        if self.pool_id.is_some() {
            self.pool_id = Some(self.pool_dir.display().to_string());
        }
        self
    }

    /// A node without shared-pool access: every connection uses the fallback.
    pub fn without_pool(mut self) -> Self {
        self.pool_id = None;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bw = &self.busy_wait;
        if !(0.0..=1.0).contains(&bw.low_load)
            || !(0.0..=1.0).contains(&bw.high_load)
            || bw.low_load > bw.high_load
        {
            return Err(ConfigError::Invalid("busy-wait thresholds out of order".into()));
        }
        if bw.sleep_low > bw.sleep_mid || bw.sleep_mid > bw.sleep_high || bw.window.is_zero() {
            return Err(ConfigError::Invalid("busy-wait sleeps out of order".into()));
        }
        if self.keys.reserved + self.keys.cached != self.keys.total || self.keys.cached == 0 {
            return Err(ConfigError::Invalid("key budget must satisfy total = reserved + cached".into()));
        }
        if self.page_size == 0
            || !self.page_size.is_power_of_two()
            || self.batch_release_threshold == 0
            || self.seal_ring_capacity == 0
            || self.message_ring_capacity < 2
            || !self.message_ring_capacity.is_power_of_two()
            || self.arena_size == 0
            || self.renew_interval.is_zero()
        {
            return Err(ConfigError::Invalid("runtime sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admin_file_overrides_defaults() {
        let cfg = OrchestratorConfig::from_toml_str(
            r#"
            pool_base = 0x100000000
            default_quota = 1048576
            lease_renew_ms = 250
            [quota]
            "7" = 4096
            "7/42" = 8192
            "#,
        )
        .unwrap();
        assert_eq!(cfg.pool_base, 0x1_0000_0000);
        assert_eq!(cfg.lease_term(), Duration::from_millis(750));
        assert_eq!(cfg.quota_for(HolderId::new(7, 42, 0)), 8192);
        assert_eq!(cfg.quota_for(HolderId::new(7, 1, 0)), 4096);
        assert_eq!(cfg.quota_for(HolderId::new(8, 1, 0)), 1 << 20);
    }

    #[test]
    fn admin_file_rejects_unaligned_pool() {
        assert!(OrchestratorConfig::from_toml_str("pool_base = 4097").is_err());
        assert!(OrchestratorConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn runtime_defaults_match_documented_values() {
        let cfg = RuntimeConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.keys, KeyBudgetConfig { total: 16, reserved: 2, cached: 14 });
        assert_eq!(cfg.batch_release_threshold, 1024);
        assert_eq!(cfg.busy_wait.sleep_mid, Duration::from_micros(5));
        assert_eq!(cfg.busy_wait.sleep_high, Duration::from_micros(150));
    }

    #[test]
    fn unordered_thresholds_rejected() {
        let mut cfg = RuntimeConfig::default();
        cfg.busy_wait.low_load = 0.6;
        assert!(cfg.validate().is_err());
    }
}
