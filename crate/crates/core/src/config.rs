//! Pipeline configuration: one TOML file with a section per module.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::TranscribeOptions;
use crate::backends::{BackendEndpoint, EndpointKind, RetryPolicy};
use crate::digest::json_digest;
use crate::features::DEFAULT_FRAME_COUNT;
use crate::grounding::GroundingOptions;
use crate::scenes::{DEFAULT_MIN_LEN, DEFAULT_THRESHOLD};
use crate::templates::{Template, TemplateError};

/// Prefix of the environment variables that override endpoint URLs, e.g.
/// `GROUNDVID_ENDPOINT_DETECT=http://host:8000`.
pub const ENDPOINT_ENV_PREFIX: &str = "GROUNDVID_ENDPOINT_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Frames sampled per video (T).
    pub frame_count: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_count: DEFAULT_FRAME_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub threshold: f64,
    pub min_len: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_len: DEFAULT_MIN_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Total judge asks per item.
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retries: crate::evalsuite::DEFAULT_RETRIES,
            max_in_flight: crate::evalsuite::DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub retry_max_ms: u64,
    pub endpoints: Vec<BackendEndpoint>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        let r = RetryPolicy::default();
        Self {
            retry_attempts: r.attempts,
            retry_base_ms: r.base_delay.as_millis() as u64,
            retry_max_ms: r.max_delay.as_millis() as u64,
            endpoints: Vec::new(),
        }
    }
}

impl BackendsConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts,
            base_delay: std::time::Duration::from_millis(self.retry_base_ms),
            max_delay: std::time::Duration::from_millis(self.retry_max_ms),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    pub scenes: SceneConfig,
    pub audio: TranscribeOptions,
    pub grounding: GroundingOptions,
    pub eval: EvalConfig,
    /// Template name → file overriding the bundled text.
    pub templates: BTreeMap<String, PathBuf>,
    pub backends: BackendsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        // relative template paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in cfg.templates.values_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.features.frame_count == 0 {
            return bad("features.frame_count must be positive".into());
        }
        if !(self.scenes.threshold > 0.0 && self.scenes.threshold.is_finite()) {
            return bad("scenes.threshold must be positive".into());
        }
        if self.scenes.min_len == 0 {
            return bad("scenes.min_len must be positive".into());
        }
        self.audio.validate().map_err(ConfigError::Invalid)?;
        self.grounding.validate().map_err(ConfigError::Invalid)?;
        if self.eval.retries == 0 || self.eval.max_in_flight == 0 {
            return bad("eval.retries and eval.max_in_flight must be positive".into());
        }
        if self.backends.retry_attempts == 0 {
            return bad("backends.retry_attempts must be positive".into());
        }
        let mut seen = Vec::new();
        for e in &self.backends.endpoints {
            e.validate().map_err(|m| ConfigError::Invalid(m.to_string()))?;
            if seen.contains(&e.kind) {
                return bad(format!("endpoint {} configured twice", e.kind));
            }
            seen.push(e.kind);
        }
        for name in self.templates.keys() {
            if Template::builtin(name).is_err() {
                return bad(format!("templates.{name}: no such template"));
            }
        }
        Ok(())
    }

    /// Apply `GROUNDVID_ENDPOINT_<KIND>` (URL) and `..._<KIND>_TOKEN`
    /// overrides from `vars`. Nothing but endpoints can be overridden.
    pub fn apply_env<I, K, V>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let vars: BTreeMap<String, String> = vars
            .into_iter()
            .filter(|(k, _)| k.as_ref().starts_with(ENDPOINT_ENV_PREFIX))
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        for kind in EndpointKind::ALL {
            let key = format!("{ENDPOINT_ENV_PREFIX}{}", kind.as_str().to_ascii_uppercase());
            let token = vars.get(&format!("{key}_TOKEN")).cloned();
            let Some(url) = vars.get(&key) else {
                if let Some(e) = self.backends.endpoints.iter_mut().find(|e| e.kind == kind) {
                    e.auth_token = token.or(e.auth_token.take());
                }
                continue;
            };
            match self.backends.endpoints.iter_mut().find(|e| e.kind == kind) {
                Some(e) => {
                    e.url = url.clone();
                    e.auth_token = token.or(e.auth_token.take());
                }
                None => self.backends.endpoints.push(BackendEndpoint {
                    auth_token: token,
                    ..BackendEndpoint::new(kind, url)
                }),
            }
        }
    }

    /// Templates in effect: bundled ones with file overrides applied.
    pub fn template(&self, name: &str) -> Result<Template, ConfigError> {
        match self.templates.get(name) {
            Some(path) => Ok(Template::from_file(name, path)?),
            None => Ok(Template::builtin(name)?),
        }
    }

    /// Digest of everything that can change results: all settings (auth
    /// tokens excluded) and the text of every template in effect.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut clean = self.clone();
        clean.templates.clear();
        for e in &mut clean.backends.endpoints {
            e.auth_token = None;
        }
        let mut template_hashes = BTreeMap::new();
        for name in crate::templates::builtin_names() {
            template_hashes.insert(name.to_string(), self.template(name)?.hash());
        }
        Ok(json_digest(&serde_json::json!({
            "config": clean,
            "templates": template_hashes,
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::from_toml("", "<empty>").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.scenes.threshold, 27.0);
        assert_eq!(cfg.grounding.iou_gate, 0.3);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text, "x").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml("[grounding]\niou_gat = 0.5\n", "x"),
            Err(ConfigError::Parse { .. })
        ));
        assert!(PipelineConfig::from_toml("colour = 1\n", "x").is_err());
    }

    #[test]
    fn ranges_checked() {
        assert!(matches!(
            PipelineConfig::from_toml("[grounding]\niou_gate = 1.5\n", "x"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(PipelineConfig::from_toml("[scenes]\nmin_len = 0\n", "x").is_err());
        assert!(PipelineConfig::from_toml("[templates]\nnope = \"a.txt\"\n", "x").is_err());
    }

    #[test]
    fn hash_tracks_settings_not_tokens() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.grounding.iou_gate = 0.4;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.apply_env([("GROUNDVID_ENDPOINT_CHAT", "http://x:1"), ("GROUNDVID_ENDPOINT_CHAT_TOKEN", "s")]);
        let mut d = a.clone();
        d.apply_env([("GROUNDVID_ENDPOINT_CHAT", "http://x:1")]);
        assert_eq!(c.hash().unwrap(), d.hash().unwrap());
        assert_ne!(a.hash().unwrap(), d.hash().unwrap());
    }

    #[test]
    fn env_overrides_endpoints_only() {
        let mut cfg = PipelineConfig::from_toml(
            "[[backends.endpoints]]\nkind = \"detect\"\nurl = \"http://a:1\"\n",
            "x",
        )
        .unwrap();
        cfg.apply_env([
            ("GROUNDVID_ENDPOINT_DETECT", "http://b:2"),
            ("GROUNDVID_ENDPOINT_VAD", "http://c:3"),
            ("GROUNDVID_SEED", "9"),
        ]);
        assert_eq!(cfg.backends.endpoints.len(), 2);
        assert_eq!(cfg.backends.endpoints[0].url, "http://b:2");
        assert_eq!(cfg.backends.endpoints[1].kind, EndpointKind::Vad);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn template_override_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.txt");
        std::fs::write(&path, "### task: judge_qa v2\n{question} {reference} {prediction}").unwrap();
        let mut cfg = PipelineConfig::default();
        let before = cfg.hash().unwrap();
        cfg.templates.insert("judge_qa".into(), path);
        assert_ne!(cfg.hash().unwrap(), before);
        assert!(cfg.template("judge_qa").unwrap().text().contains("v2"));
    }
}
