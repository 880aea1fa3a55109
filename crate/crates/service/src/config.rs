//! Service configuration: a JSON file plus environment overrides.

use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use situwatch_core::{AlertPolicy, ChannelSpec, SimilarityConfig, WindowConfig};

pub const ENV_PORT: &str = "SITUWATCH_PORT";
pub const ENV_CONFIG: &str = "SITUWATCH_CONFIG";
pub const ENV_DATA_DIR: &str = "SITUWATCH_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    /// HTTP port; 0 picks a free one.
    pub port: u16,
    /// Raw TCP line-protocol ingest port. Disabled when absent.
    pub tcp_port: Option<u16>,
    /// Baseline store.
    pub data_dir: PathBuf,
    /// Dashboard assets served at `/` when set.
    pub static_dir: Option<PathBuf>,
    /// Interval of the wall-clock heartbeat tick, in milliseconds.
    pub heartbeat_ms: u64,
    pub channels: Vec<ChannelSpec>,
    pub window: WindowConfig,
    pub policy: AlertPolicy,
    pub similarity: SimilarityConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            tcp_port: None,
            data_dir: PathBuf::from("data"),
            static_dir: None,
            heartbeat_ms: 1000,
            channels: ["hr", "eda", "resp"].map(ChannelSpec::new).to_vec(),
            window: WindowConfig::default(),
            policy: AlertPolicy::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `path`, or the file named by `SITUWATCH_CONFIG`, or the defaults, then
    /// applies the port and data-dir overrides from the environment.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let from_env = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let mut cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(port) = get(ENV_PORT) {
            self.port = port
                .trim()
                .parse()
                .with_context(|| format!("{ENV_PORT}={port:?} is not a port number"))?;
        }
        if let Some(dir) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.channels.is_empty() {
            bail!("at least one channel must be configured");
        }
        situwatch_core::situation::validate_specs(&self.channels)?;
        self.window.validate()?;
        self.policy.validate()?;
        self.similarity.validate()?;
        if self.heartbeat_ms == 0 {
            bail!("heartbeat_ms must be > 0");
        }
        Ok(())
    }
}
