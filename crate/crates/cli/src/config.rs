//! Flat, typed settings resolved from defaults, a TOML file, environment
//! variables and command-line flags, in increasing precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use demo_forge::infer::ShotSelection;
use demo_forge::promptkit::{SerializationFormat, TypeFilter, DEFAULT_INSTRUCTION, DEFAULT_TOKEN_BUDGET};
use demo_forge::refine::{Ratio, POOL_MERGED};
use demo_forge::LanguageTag;

pub const ENV_PREFIX: &str = "DEMO_FORGE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    MockParametric,
    MockScripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub backend: BackendKind,
    /// JSON file configuring the mock backend.
    pub mock_config: String,
    pub base_url: String,
    pub model: String,
    pub completions_path: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// 0 disables client-side throttling.
    pub requests_per_minute: u32,

    pub embedder: EmbedderKind,
    pub embed_base_url: String,
    pub embed_model: String,
    pub embed_cache: String,

    /// Command line of the Python sidecar, used when `language = "python"`.
    pub python_sidecar: Vec<String>,
    pub sidecar_timeout_ms: u64,

    pub language: LanguageTag,
    pub instruction: String,
    pub format: SerializationFormat,
    pub token_budget: usize,
    pub type_filter: TypeFilter,
    pub max_new_tokens: u32,

    pub corpus: String,
    pub seed_pool: String,
    pub subset: usize,
    pub attempts: u32,
    pub harvest_shots: usize,
    pub harvest_temperature: f64,
    pub harvest_seed: u64,

    pub threshold: Ratio,
    pub strict_threshold: bool,
    pub min_uses: u32,
    pub min_rate: Ratio,
    pub one_shot_temperature: f64,
    pub pairing_seed: u64,

    pub pool: String,
    pub queries: String,
    pub infer_shots: usize,
    pub infer_attempts: u32,
    pub infer_temperature: f64,
    pub infer_seed: u64,
    pub reuse_context: bool,
    pub selection: ShotSelection,

    /// Worker threads; 0 means one per logical core.
    pub parallel: usize,
    pub max_inflight: usize,
    /// Append every backend exchange to `exchanges.jsonl` in the run.
    pub log_exchanges: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            backend: BackendKind::MockParametric,
            mock_config: String::new(),
            base_url: String::new(),
            model: String::new(),
            completions_path: "/v1/completions".into(),
            timeout_secs: 60,
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            requests_per_minute: 0,
            embedder: EmbedderKind::Mock,
            embed_base_url: String::new(),
            embed_model: String::new(),
            embed_cache: String::new(),
            python_sidecar: Vec::new(),
            sidecar_timeout_ms: 10_000,
            language: LanguageTag::Dsl,
            instruction: DEFAULT_INSTRUCTION.into(),
            format: SerializationFormat::Full,
            token_budget: DEFAULT_TOKEN_BUDGET,
            type_filter: TypeFilter::None,
            max_new_tokens: 256,
            corpus: String::new(),
            seed_pool: String::new(),
            subset: 3500,
            attempts: 20,
            harvest_shots: 8,
            harvest_temperature: 0.5,
            harvest_seed: 0,
            threshold: Ratio::new(1, 5),
            strict_threshold: false,
            min_uses: 100,
            min_rate: Ratio::new(1, 10),
            one_shot_temperature: 0.0,
            pairing_seed: 0,
            pool: POOL_MERGED.into(),
            queries: String::new(),
            infer_shots: 20,
            infer_attempts: 20,
            infer_temperature: 0.5,
            infer_seed: 0,
            reuse_context: false,
            selection: ShotSelection::Random,
            parallel: 0,
            max_inflight: 8,
            log_exchanges: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    File { path: String, message: String },
    #[error("unknown setting {0:?}")]
    UnknownKey(String),
    #[error("invalid settings: {0}")]
    Invalid(String),
}

/// Interpret a raw string as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Layer defaults, `file`, `DEMO_FORGE_<KEY>` variables (read through
/// `env`) and `flags`.
pub fn resolve(
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    flags: &[(&str, toml::Value)],
) -> Result<Settings, ConfigError> {
    let mut table = toml::Table::try_from(Settings::default()).expect("defaults serialize");
    let known: Vec<String> = table.keys().cloned().collect();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let parsed: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for (k, v) in parsed {
            if !known.contains(&k) {
                return Err(ConfigError::UnknownKey(k));
            }
            table.insert(k, v);
        }
    }
    for k in &known {
        if let Some(raw) = env(&format!("{ENV_PREFIX}{}", k.to_ascii_uppercase())) {
            table.insert(k.clone(), parse_value(&raw));
        }
    }
    for (k, v) in flags {
        if !known.iter().any(|x| x == k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        table.insert(k.to_string(), v.clone());
    }
    let s: Settings = table.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

impl Settings {
    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.attempts == 0 || self.infer_attempts == 0 {
            return bad("attempt counts must be at least 1");
        }
        if self.max_inflight == 0 {
            return bad("max_inflight must be at least 1");
        }
        if self.token_budget == 0 {
            return bad("token_budget must be positive");
        }
        Ok(())
    }
}
