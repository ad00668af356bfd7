//! Pipeline configuration: a TOML file, then `TABRAG_*` environment overrides,
//! then command-line flags (applied by the CLI).
//!
//! ```toml
//! [endpoints.vlm]
//! base_url = "http://127.0.0.1:8000"
//! model = "Qwen/Qwen2.5-VL-32B-Instruct"
//!
//! [endpoints.llm]
//! base_url = "http://127.0.0.1:8001"
//! model = "Qwen/Qwen3-14B"
//!
//! [layout]
//! provider = "precomputed"
//! dir = "layouts"
//!
//! [pipeline]
//! policy = "always"
//! rationale = "model"
//! embedder = "hashing"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::extraction::FallbackPolicy;
use crate::gateway::{EndpointConfig, Role};
use crate::layout::{GroupingThresholds, LayoutProvider};
use crate::rationale::TableRewrite;
use crate::store::{DEFAULT_DIMS, DEFAULT_PARTITION_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("no {0} endpoint configured")]
    MissingEndpoint(Role),
    #[error("{0}")]
    Invalid(String),
}

/// One `[endpoints.<role>]` table. Unset fields fall back to the role defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    /// Name of an environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<f64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub max_attempts: Option<u32>,
    pub backoff_secs: Option<f64>,
    pub max_concurrency: Option<usize>,
    pub max_image_bytes: Option<usize>,
    pub embed_batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub vlm: Option<EndpointSection>,
    pub llm: Option<EndpointSection>,
    pub judge: Option<EndpointSection>,
    pub embedder: Option<EndpointSection>,
}

impl Endpoints {
    fn slot(&mut self, role: Role) -> &mut Option<EndpointSection> {
        match role {
            Role::Vlm => &mut self.vlm,
            Role::Llm => &mut self.llm,
            Role::Judge => &mut self.judge,
            Role::Embedder => &mut self.embedder,
        }
    }

    fn get(&self, role: Role) -> Option<&EndpointSection> {
        match role {
            Role::Vlm => self.vlm.as_ref(),
            Role::Llm => self.llm.as_ref(),
            Role::Judge => self.judge.as_ref(),
            Role::Embedder => self.embedder.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Precomputed,
    Http,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub provider: ProviderKind,
    pub dir: Option<PathBuf>,
    pub base_url: Option<String>,
    pub timeout_secs: f64,
    pub max_gap_ratio: f64,
    pub min_overlap_ratio: f64,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let g = GroupingThresholds::default();
        Self {
            provider: ProviderKind::None,
            dir: None,
            base_url: None,
            timeout_secs: 60.0,
            max_gap_ratio: g.max_gap_ratio,
            min_overlap_ratio: g.min_overlap_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub policy: FallbackPolicy,
    pub rationale: TableRewrite,
    pub embedder: EmbedderKind,
    pub dims: usize,
    pub k: usize,
    pub workers: usize,
    /// Pages per retrieval partition; 0 searches the whole store.
    pub partition_size: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            policy: FallbackPolicy::Always,
            rationale: TableRewrite::Model,
            embedder: EmbedderKind::Hashing,
            dims: DEFAULT_DIMS,
            k: 10,
            workers: 4,
            partition_size: DEFAULT_PARTITION_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub endpoints: Endpoints,
    pub layout: LayoutSection,
    pub pipeline: PipelineSection,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut config = Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    /// `TABRAG_<ROLE>_BASE_URL`, `TABRAG_<ROLE>_MODEL` and `TABRAG_<ROLE>_API_KEY`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for role in Role::ALL {
            let prefix = format!("TABRAG_{}", role.as_str().to_ascii_uppercase());
            let base_url = lookup(&format!("{prefix}_BASE_URL"));
            let model = lookup(&format!("{prefix}_MODEL"));
            let api_key = lookup(&format!("{prefix}_API_KEY"));
            if base_url.is_none() && model.is_none() && api_key.is_none() {
                continue;
            }
            let section = self.endpoints.slot(role).get_or_insert_with(EndpointSection::default);
            if base_url.is_some() {
                section.base_url = base_url;
            }
            if model.is_some() {
                section.model = model;
            }
            if api_key.is_some() {
                section.api_key = api_key;
            }
        }
    }

    pub fn has_endpoint(&self, role: Role) -> bool {
        self.endpoints.get(role).is_some_and(|s| s.base_url.is_some())
    }

    pub fn endpoint(&self, role: Role) -> Result<EndpointConfig, ConfigError> {
        let s = self.endpoints.get(role).ok_or(ConfigError::MissingEndpoint(role))?;
        let base_url = s.base_url.clone().ok_or(ConfigError::MissingEndpoint(role))?;
        let mut e = EndpointConfig::new(role, base_url, s.model.clone().unwrap_or_else(|| "default".into()));
        e.api_key = s.api_key.clone().or_else(|| s.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()));
        let secs = |v: f64, what: &str| {
            Duration::try_from_secs_f64(v).map_err(|_| ConfigError::Invalid(format!("{role}.{what} must be a non-negative number")))
        };
        if let Some(t) = s.timeout_secs {
            e.timeout = secs(t, "timeout_secs")?;
        }
        if let Some(b) = s.backoff_secs {
            e.backoff_base = secs(b, "backoff_secs")?;
        }
        e.temperature = s.temperature.unwrap_or(e.temperature);
        e.max_tokens = s.max_tokens.unwrap_or(e.max_tokens);
        e.max_attempts = s.max_attempts.unwrap_or(e.max_attempts);
        e.max_concurrency = s.max_concurrency.unwrap_or(e.max_concurrency);
        e.max_image_bytes = s.max_image_bytes.unwrap_or(e.max_image_bytes);
        e.embed_batch_size = s.embed_batch_size.unwrap_or(e.embed_batch_size);
        Ok(e)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn layout_provider(&self) -> Result<LayoutProvider, ConfigError> {
        let l = &self.layout;
        Ok(match l.provider {
            ProviderKind::None => LayoutProvider::None,
            ProviderKind::Precomputed => {
                let dir = l.dir.as_ref().ok_or_else(|| ConfigError::Invalid("layout.dir is required for the precomputed provider".into()))?;
                LayoutProvider::PrecomputedFiles { dir: self.resolve(dir) }
            }
            ProviderKind::Http => LayoutProvider::HttpService {
                base_url: l
                    .base_url
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("layout.base_url is required for the http provider".into()))?,
                timeout: Duration::try_from_secs_f64(l.timeout_secs)
                    .map_err(|_| ConfigError::Invalid("layout.timeout_secs must be non-negative".into()))?,
            },
        })
    }

    pub fn grouping(&self) -> GroupingThresholds {
        GroupingThresholds { max_gap_ratio: self.layout.max_gap_ratio, min_overlap_ratio: self.layout.min_overlap_ratio }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_role_table() {
        let c = Config::from_toml(
            r#"
            [endpoints.vlm]
            base_url = "http://localhost:1"
            [endpoints.llm]
            base_url = "http://localhost:2"
            max_tokens = 100
            "#,
        )
        .unwrap();
        let vlm = c.endpoint(Role::Vlm).unwrap();
        assert_eq!((vlm.temperature, vlm.max_tokens, vlm.max_attempts, vlm.max_concurrency), (1.0, 16384, 3, 4));
        assert_eq!(vlm.backoff_base, Duration::from_secs(1));
        assert_eq!(c.endpoint(Role::Llm).unwrap().max_tokens, 100);
        assert!(matches!(c.endpoint(Role::Judge), Err(ConfigError::MissingEndpoint(Role::Judge))));
        assert_eq!(c.pipeline.k, 10);
        assert_eq!(c.pipeline.partition_size, 25);
        assert_eq!(c.layout_provider().unwrap(), LayoutProvider::None);
    }

    #[test]
    fn env_overrides_file() {
        let mut c = Config::from_toml("[endpoints.judge]\nbase_url = \"http://a\"\nmodel = \"m\"\n").unwrap();
        c.apply_env(|k| match k {
            "TABRAG_JUDGE_BASE_URL" => Some("http://b".into()),
            "TABRAG_EMBEDDER_MODEL" => Some("emb".into()),
            _ => None,
        });
        let j = c.endpoint(Role::Judge).unwrap();
        assert_eq!((j.base_url.as_str(), j.model.as_str()), ("http://b", "m"));
        assert!(c.endpoints.embedder.is_some());
        assert!(!c.has_endpoint(Role::Embedder));
        assert_eq!(j.max_tokens, 8192);
    }

    #[test]
    fn rejects_unknown_keys_and_resolves_layout_dir() {
        assert!(Config::from_toml("[pipeline]\nbogus = 1\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[layout]\nprovider = \"precomputed\"\ndir = \"layouts\"\n[pipeline]\npolicy = \"on_failure_only\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.layout_provider().unwrap(), LayoutProvider::PrecomputedFiles { dir: dir.path().join("layouts") });
        assert_eq!(c.pipeline.policy, FallbackPolicy::OnFailureOnly);
    }
}
