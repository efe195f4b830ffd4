use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use groundvid::backends::{Backend, BackendError, EndpointKind, HttpBackend, MockBackend};
use groundvid::cache::{write_atomic, Cache, Manifest};
use groundvid::config::PipelineConfig;
use groundvid::digest::sha256_hex;
use groundvid::ingest::Video;
use groundvid::templates::builtin_names;

use crate::{GlobalArgs, JudgeArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Pipeline(String),
    #[error("backend unreachable: {0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(_) => 2,
            CliError::Transport(_) => 3,
        }
    }

    pub fn pipeline(e: impl std::fmt::Display) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        if e.is_transport() {
            CliError::Transport(e.to_string())
        } else {
            CliError::Pipeline(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

pub struct Context {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    pub cache: Cache,
    pub workers: usize,
    pub mock: bool,
    pub out: Option<PathBuf>,
    pub backend: Box<dyn Backend>,
}

impl Context {
    pub fn new(args: &GlobalArgs) -> Result<Self, CliError> {
        if args.max_workers == 0 {
            return Err(CliError::Usage("--max-workers must be at least 1".into()));
        }
        let mut config = match &args.config {
            Some(p) => PipelineConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        config.apply_env(std::env::vars());
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let mut template_hashes = BTreeMap::new();
        for name in builtin_names() {
            let t = config.template(name).map_err(|e| CliError::Usage(e.to_string()))?;
            template_hashes.insert(name.to_string(), t.hash());
        }
        let mut config_hash = config.hash().map_err(|e| CliError::Usage(e.to_string()))?;
        if args.mock {
            // mock and served models never share cache entries or reports
            config_hash = sha256_hex(format!("mock\n{config_hash}").as_bytes());
        }
        let backend = make_backend(&config, args.mock, None);
        Ok(Self {
            config,
            config_hash,
            template_hashes,
            cache: Cache::new(&args.cache_dir),
            workers: args.max_workers,
            mock: args.mock,
            out: args.out.clone(),
            backend,
        })
    }

    pub fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    pub fn backend_label(&self, kinds: &[EndpointKind]) -> String {
        kinds
            .iter()
            .map(|k| format!("{k}={}", self.backend.name(*k)))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Judge backend: the shared one, or a chat server at `--judge-endpoint`.
    pub fn judge_backend(&self, args: &JudgeArgs) -> Box<dyn Backend> {
        make_backend(&self.config, self.mock, args.judge_endpoint.as_deref())
    }

    pub fn template(&self, name: &str) -> Result<groundvid::templates::Template, CliError> {
        self.config.template(name).map_err(CliError::pipeline)
    }

    pub fn write_artifact(
        &self,
        path: &Path,
        bytes: &[u8],
        stage: &str,
        inputs: BTreeMap<String, String>,
        backend: String,
        failures: Vec<String>,
    ) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        Manifest {
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            template_hashes: self.template_hashes.clone(),
            input_digests: inputs,
            output_digest: sha256_hex(bytes),
            backend,
            failures,
        }
        .write_for(path)?;
        Ok(())
    }
}

fn make_backend(config: &PipelineConfig, mock: bool, judge_url: Option<&str>) -> Box<dyn Backend> {
    if mock {
        return Box::new(MockBackend::new(config.seed));
    }
    let mut endpoints = config.backends.endpoints.clone();
    if let Some(url) = judge_url {
        match endpoints.iter_mut().find(|e| e.kind == EndpointKind::Chat) {
            Some(e) => e.url = url.to_string(),
            None => endpoints.push(groundvid::backends::BackendEndpoint::new(EndpointKind::Chat, url)),
        }
    }
    Box::new(HttpBackend::new(endpoints, config.backends.retry_policy()))
}

/// Digest of a decoded video: fps, frame dimensions, pixels and audio.
pub fn video_digest(v: &Video) -> String {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&v.frames.fps().to_le_bytes());
    for f in v.frames.frames() {
        bytes.extend_from_slice(&f.width().to_le_bytes());
        bytes.extend_from_slice(&f.height().to_le_bytes());
        bytes.extend_from_slice(f.as_raw());
    }
    for s in &v.audio.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    sha256_hex(&bytes)
}
