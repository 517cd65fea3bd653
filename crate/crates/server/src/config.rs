//! The single TOML configuration document.

use std::path::{Path, PathBuf};
use std::time::Duration;

use feedlens_core::classify::{
    DimensionSpec, DEFAULT_FOLD_TOP_N, DEFAULT_TEST_FRACTION, SHOTS_SIMPLE,
};
use feedlens_core::llm::live::LiveConfig;
use feedlens_core::llm::DEFAULT_EMBED_MODEL;
use feedlens_core::topics::TopicConfig;
use feedlens_core::ChatParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: GatewayConfig,
    pub classify: ClassifyConfig,
    pub topics: TopicConfig,
    pub kernel: KernelConfig,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// An OpenAI-compatible endpoint.
    Live,
    /// Live, with every exchange appended to the cassette file.
    Record,
    /// Answers only from cassettes; never touches the network.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: Backend,
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub chat_model: String,
    pub embed_model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Cassette file, or a directory whose `*.jsonl` files are all loaded
    /// (replay only).
    pub cassettes: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub rate_per_sec: f64,
    pub burst: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let live = LiveConfig::default();
        let params = ChatParams::default();
        Self {
            backend: Backend::Live,
            base_url: live.base_url,
            api_key_env: "OPENAI_API_KEY".into(),
            chat_model: params.model,
            embed_model: DEFAULT_EMBED_MODEL.into(),
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            cassettes: None,
            timeout_secs: live.timeout.as_secs(),
            max_attempts: live.max_attempts,
            rate_per_sec: live.rate_per_sec,
            burst: live.burst,
        }
    }
}

impl GatewayConfig {
    pub fn chat_params(&self) -> ChatParams {
        ChatParams {
            model: self.chat_model.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        }
    }

    pub fn live(&self) -> LiveConfig {
        LiveConfig {
            base_url: self.base_url.clone(),
            api_key: std::env::var(&self.api_key_env).ok(),
            embed_model: self.embed_model.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            max_attempts: self.max_attempts,
            rate_per_sec: self.rate_per_sec,
            burst: self.burst,
            ..LiveConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Demonstrations per prompt.
    pub k: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub fold_top_n: Option<usize>,
    /// Dimensions to declare in the store at startup.
    pub dimensions: Vec<DimensionSpec>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            k: SHOTS_SIMPLE,
            seed: 0,
            test_fraction: DEFAULT_TEST_FRACTION,
            fold_top_n: Some(DEFAULT_FOLD_TOP_N),
            dimensions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Kernel program and arguments. Empty runs the in-process stub.
    pub command: Vec<String>,
    pub timeout_secs: f64,
    pub quota_bytes: u64,
    pub max_replans: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            timeout_secs: feedlens_agent::kernel::DEFAULT_TIMEOUT_SECS,
            quota_bytes: feedlens_agent::kernel::DEFAULT_QUOTA_BYTES,
            max_replans: feedlens_agent::planner::DEFAULT_MAX_REPLANS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Shared bearer token. When set, every endpoint but artifact downloads
    /// requires it.
    pub token: Option<String>,
    /// Pipeline jobs that may run at once.
    pub workers: usize,
    /// Store log, topic state and session workspaces live here.
    pub data_dir: PathBuf,
    /// Key for artifact URLs. A random one is drawn when unset, so URLs do
    /// not survive a restart.
    pub artifact_secret: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            token: None,
            workers: 2,
            data_dir: PathBuf::from("feedlens-data"),
            artifact_secret: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        if config.server.data_dir.is_relative() {
            config.server.data_dir = base.join(&config.server.data_dir);
        }
        if let Some(c) = config
            .gateway
            .cassettes
            .as_mut()
            .filter(|c| c.is_relative())
        {
            *c = base.join(&*c);
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.classify.test_fraction) {
            return Err(ConfigError::Invalid(
                "classify.test_fraction must be in [0, 1)".into(),
            ));
        }
        if self.server.workers == 0 {
            return Err(ConfigError::Invalid(
                "server.workers must be at least 1".into(),
            ));
        }
        if self.kernel.timeout_secs <= 0.0 {
            return Err(ConfigError::Invalid(
                "kernel.timeout_secs must be positive".into(),
            ));
        }
        if self.gateway.backend != Backend::Live && self.gateway.cassettes.is_none() {
            return Err(ConfigError::Invalid(
                "record and replay backends need gateway.cassettes".into(),
            ));
        }
        self.topics
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
