//! TOML run configuration. Command-line flags override every value here.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use knowmark::Scheme;
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub watermarks: Vec<String>,
    pub scheme: Option<Scheme>,
    pub carriers: Option<PathBuf>,
    pub n_carriers: Option<usize>,
    pub snippets: Option<usize>,
    pub knowledge: Option<PathBuf>,
    pub external: Option<PathBuf>,
    pub external_size: Option<usize>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<u32>,
    pub base_generic: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<usize>,
    pub target: Option<String>,
    pub null: Option<String>,
    pub model_name: Option<String>,
    /// Environment variable holding the bearer token for remote targets.
    pub token_env: Option<String>,
    pub concurrency: Option<usize>,
}

const SECRET_KEYS: &[&str] = &["token", "api_key", "apikey", "secret", "password"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let raw: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(key) = raw
            .keys()
            .find(|k| SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()))
        {
            bail!(
                "config key {key:?} is not allowed: secrets are read from the environment \
                 variable named by `token_env`"
            );
        }
        let mut cfg: RunConfig = raw
            .try_into()
            .with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths are taken from the config file's directory
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.carriers, &mut cfg.knowledge, &mut cfg.external] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(dir.join(rel));
            }
        }
        Ok(cfg)
    }
}
