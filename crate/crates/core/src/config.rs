//! The JSON run configuration consumed by the command-line tool and server.
//!
//! Unknown keys are rejected everywhere. Relative resource and transcript
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{EvalConfig, FusionError};
use crate::hashing::sha256_hex;
use crate::lexicon::{AntonymTable, AttackTemplates, CueList, Lexicon, ResourceError, Resources};
use crate::providers::baseline::DEFAULT_DIM;
use crate::providers::remote::RemoteSettings;
use crate::providers::transcript::TranscriptError;
use crate::providers::{
    ProviderError, ProviderTranscript, Providers, RemoteProvider, TranscriptRecorder, TranscriptReplayer,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] FusionError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("invalid configuration: {0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Seeded in-process stand-ins.
    Baseline {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    /// HTTP provider server speaking the wire protocol.
    Remote(RemoteSettings),
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Baseline {
            seed: 0,
            dim: DEFAULT_DIM,
        }
    }
}

impl ProviderConfig {
    pub fn dim(&self) -> usize {
        match self {
            ProviderConfig::Baseline { dim, .. } => *dim,
            ProviderConfig::Remote(r) => r.dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    /// Wrap the configured providers and write every call to the file.
    Record,
    /// Answer every call from the file; misses are errors.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptConfig {
    pub path: PathBuf,
    pub mode: TranscriptMode,
}

/// Optional replacement resource files; bundled defaults otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourcePaths {
    pub lexicon: Option<PathBuf>,
    pub cues: Option<PathBuf>,
    pub antonyms: Option<PathBuf>,
    pub attack_templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub providers: ProviderConfig,
    pub transcript: Option<TranscriptConfig>,
    pub eval: EvalConfig,
    pub resources: ResourcePaths,
    /// Case-level worker pool size; `None` uses the CPU count.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

/// Providers ready for use plus, in record mode, the recorder to flush.
pub struct BuiltProviders {
    pub providers: Providers,
    pub recorder: Option<Arc<TranscriptRecorder>>,
    /// Digest of the replayed transcript, if any.
    pub transcript_hash: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.resources.lexicon,
            &mut self.resources.cues,
            &mut self.resources.antonyms,
            &mut self.resources.attack_templates,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(t) = &mut self.transcript {
            fix(&mut t.path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.eval.validate()?;
        if self.providers.dim() == 0 {
            return Err(ConfigError::Other("provider dim must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::Other("workers must be >= 1".into()));
        }
        if let ProviderConfig::Remote(r) = &self.providers {
            if r.max_in_flight == 0 || r.batch_size == 0 {
                return Err(ConfigError::Other(
                    "remote max_in_flight and batch_size must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn load_resources(&self) -> Result<Resources, ConfigError> {
        let r = &self.resources;
        Ok(Resources {
            lexicon: match &r.lexicon {
                Some(p) => Lexicon::load(p)?,
                None => Lexicon::default_pathology(),
            },
            cues: match &r.cues {
                Some(p) => CueList::load(p)?,
                None => CueList::default_cues(),
            },
            antonyms: match &r.antonyms {
                Some(p) => AntonymTable::load(p)?,
                None => AntonymTable::default_table(),
            },
            attack_templates: match &r.attack_templates {
                Some(p) => AttackTemplates::load(p)?,
                None => AttackTemplates::default_templates(),
            },
        })
    }

    /// sha256 of the canonical JSON of this config plus the resource digest.
    /// Output-only settings (`workers`, `output_dir`) and the transcript mode do
    /// not affect scores and are excluded.
    pub fn hash(&self, resources: &Resources) -> String {
        let scoring = RunConfig {
            workers: None,
            output_dir: None,
            transcript: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&scoring).expect("config serializes");
        sha256_hex(format!("{json}\n{}", resources.digest()).as_bytes())
    }

    /// Builds the provider set, applying transcript record/replay if configured.
    pub fn build_providers(&self, resources: &Resources) -> Result<BuiltProviders, ConfigError> {
        let seed = match &self.providers {
            ProviderConfig::Baseline { seed, .. } => Some(*seed),
            ProviderConfig::Remote(_) => None,
        };
        if let Some(TranscriptConfig {
            path,
            mode: TranscriptMode::Replay,
        }) = &self.transcript
        {
            let t = ProviderTranscript::load(path)?;
            let hash = t.digest();
            let replayer = TranscriptReplayer::new(t, self.providers.dim());
            return Ok(BuiltProviders {
                providers: replayer.providers(),
                recorder: None,
                transcript_hash: Some(hash),
            });
        }
        let inner = match &self.providers {
            ProviderConfig::Baseline { seed, dim } => {
                Providers::baseline(*seed, *dim, &resources.lexicon, &resources.antonyms)
            }
            ProviderConfig::Remote(settings) => RemoteProvider::new(settings.clone())?.providers(),
        };
        match &self.transcript {
            Some(TranscriptConfig {
                mode: TranscriptMode::Record,
                ..
            }) => {
                let rec = TranscriptRecorder::new(inner, seed);
                Ok(BuiltProviders {
                    providers: rec.providers(),
                    recorder: Some(rec),
                    transcript_hash: None,
                })
            }
            _ => Ok(BuiltProviders {
                providers: inner,
                recorder: None,
                transcript_hash: None,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(RunConfig::parse(r#"{"eval": {"top_k": 2}, "nope": 1}"#).is_err());
        assert!(RunConfig::parse(r#"{"eval": {"weights": {"w_g": 0.5, "w_l": 0.5, "w_s": 0.5}}}"#).is_err());
        let r = RunConfig::parse(r#"{"providers": {"kind": "remote", "endpoint": "http://x", "dim": 8}}"#).unwrap();
        assert_eq!(r.providers.dim(), 8);
    }

    #[test]
    fn hash_ignores_output_settings() {
        let res = Resources::bundled();
        let a = RunConfig::default();
        let b = RunConfig {
            workers: Some(3),
            output_dir: Some("out".into()),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(&res), b.hash(&res));
        let c = RunConfig {
            providers: ProviderConfig::Baseline { seed: 1, dim: 64 },
            ..RunConfig::default()
        };
        assert_ne!(a.hash(&res), c.hash(&res));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cues.txt"), "consistent with\n").unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"resources": {"cues": "cues.txt"}}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.resources.cues.as_deref(), Some(dir.path().join("cues.txt").as_path()));
        assert_eq!(c.load_resources().unwrap().cues.phrases().len(), 1);
    }
}
