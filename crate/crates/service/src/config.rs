//! Service and CLI configuration, read from TOML. Secrets never live in the
//! file: endpoints name the environment variable that holds their key.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use clinflow_core::llm::{ChatCompletionsClient, ChatEndpoint, DirectorClient, JudgeClient, ReplayModel};
use clinflow_core::prompts;
use clinflow_core::SessionConfig;

pub const LIVE_PHYSICIAN_TIMEOUT: Duration = Duration::from_secs(24 * 60 * 60);
pub const TEST_PHYSICIAN_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Canned outputs from a JSONL replay file.
    Replay { path: PathBuf },
    /// A chat-completions-compatible HTTP endpoint.
    Chat {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    120
}

impl ModelConfig {
    fn chat(&self, system_prompt: Option<String>) -> Option<ChatCompletionsClient> {
        match self {
            ModelConfig::Chat {
                base_url,
                model,
                api_key_env,
                timeout_secs,
            } => Some(ChatCompletionsClient::new(ChatEndpoint {
                base_url: base_url.clone(),
                model: model.clone(),
                api_key_env: api_key_env.clone(),
                system_prompt,
                timeout_secs: *timeout_secs,
            })),
            ModelConfig::Replay { .. } => None,
        }
    }

    pub fn replay(&self) -> anyhow::Result<Option<ReplayModel>> {
        match self {
            ModelConfig::Replay { path } => Ok(Some(
                ReplayModel::load(path).with_context(|| format!("loading replay {}", path.display()))?,
            )),
            ModelConfig::Chat { .. } => Ok(None),
        }
    }

    pub fn director(&self) -> anyhow::Result<Arc<dyn DirectorClient>> {
        if let Some(r) = self.replay()? {
            return Ok(Arc::new(r.with_id("replay-director")));
        }
        let client = self
            .chat(Some(prompts::DIRECTOR_SYSTEM.text.to_string()))
            .expect("chat config");
        Ok(Arc::new(client))
    }

    pub fn judge(&self) -> anyhow::Result<Arc<dyn JudgeClient>> {
        if let Some(r) = self.replay()? {
            return Ok(Arc::new(r.with_id("replay-judge")));
        }
        Ok(Arc::new(self.chat(None).expect("chat config")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Environment variable holding the static bearer token, if any.
    pub token_env: Option<String>,
    pub physician_timeout_secs: u64,
    pub log_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            token_env: None,
            physician_timeout_secs: LIVE_PHYSICIAN_TIMEOUT.as_secs(),
            log_dir: PathBuf::from("sessions"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub director: Option<ModelConfig>,
    pub judge: Option<ModelConfig>,
    pub session: SessionConfig,
    pub server: ServerConfig,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Config = toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        cfg.session.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Config> {
        match path {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }

    pub fn director(&self) -> anyhow::Result<Arc<dyn DirectorClient>> {
        match &self.director {
            Some(m) => m.director(),
            None => bail!("no director configured: pass --replay or set [director] in the config"),
        }
    }
}
