use std::path::{Path, PathBuf};

use evolvex_core::graphgen::GeneratorConfig;
use evolvex_core::promptgen::{HttpProviderConfig, DEFAULT_CONCURRENCY};
use evolvex_core::train::TrainConfig;
use serde::Deserialize;

pub const CONFIG_ENV: &str = "EVOLVEX_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "evolvex.json";
pub const DEFAULT_HORIZON: usize = 4;

/// `llm` section: every key optional so flags can fill the gaps.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    pub url: Option<String>,
    pub model: Option<String>,
    pub timeout_ms: Option<u64>,
    pub concurrency: Option<usize>,
}

impl LlmSection {
    pub fn resolve(&self) -> Result<HttpProviderConfig, String> {
        let url = self.url.clone().ok_or("the http provider needs llm.url (or --llm-url)")?;
        Ok(HttpProviderConfig {
            url,
            model: self.model.clone().unwrap_or_else(|| "default".to_string()),
            timeout_ms: self.timeout_ms.unwrap_or(60_000),
            concurrency: self.concurrency.unwrap_or(DEFAULT_CONCURRENCY),
        })
    }
}

/// Contents of `evolvex.json`. Flags are applied on top.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub llm: LlmSection,
    pub horizon: Option<usize>,
    pub eval_seed: Option<u64>,
}

impl RunConfig {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(DEFAULT_HORIZON)
    }
}

/// `--config`, then `$EVOLVEX_CONFIG`, then `./evolvex.json` when it exists.
pub fn config_path(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(CONFIG_ENV).filter(|p| !p.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let local = PathBuf::from(DEFAULT_CONFIG_FILE);
    local.exists().then_some(local)
}

pub fn load(flag: Option<&Path>) -> Result<RunConfig, String> {
    let Some(path) = config_path(flag) else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}
