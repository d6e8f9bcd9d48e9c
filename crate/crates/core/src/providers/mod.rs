//! Pluggable learned components: image embedder, text embedder, NLI scorer
//! and the subject report generator.
//!
//! Three families implement the traits:
//!
//! * [`baseline`]: deterministic, seeded stand-ins with no model weights.
//! * [`remote`]: HTTP clients for the JSON wire protocol in [`wire`].
//! * [`transcript`]: record/replay of any provider keyed by request hash.
//!
//! Failures are always surfaced as [`ProviderError`]; no provider substitutes
//! a default score.

pub mod baseline;
pub mod remote;
pub mod transcript;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, l2_norm};

pub use baseline::{BaselineImageEmbedder, BaselineNli, BaselineSubject, BaselineTextEmbedder};
pub use remote::RemoteProvider;
pub use transcript::{ProviderTranscript, TranscriptRecorder, TranscriptReplayer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider {provider} unreachable: {detail}")]
    Unreachable { provider: String, detail: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty text")]
    EmptyText,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty image raster")]
    EmptyImage,
    #[error("no generation available: {0}")]
    EmptyGeneration(String),
    #[error("transcript has no {provider} entry for key {key}")]
    TranscriptMiss { provider: String, key: String },
    #[error("invalid embedding: {0}")]
    InvalidVector(String),
    #[error("contradiction probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type ProviderResult<T> = Result<T, ProviderError>;

/// A unit-norm embedding with finite components.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    /// Accepts `values` only if it is already unit-norm.
    pub fn new(values: Vec<f64>) -> ProviderResult<Self> {
        if values.is_empty() {
            return Err(ProviderError::InvalidVector("zero-dimensional".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidVector("non-finite component".into()));
        }
        let n = l2_norm(&values);
        if (n - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(ProviderError::InvalidVector(format!("norm {n} is not 1")));
        }
        Ok(Self { values })
    }

    /// L2-normalizes `values`; a zero or non-finite vector is rejected.
    pub fn normalize(mut values: Vec<f64>) -> ProviderResult<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidVector("non-finite component".into()));
        }
        let n = l2_norm(&values);
        if n == 0.0 {
            return Err(ProviderError::InvalidVector("zero vector".into()));
        }
        values.iter_mut().for_each(|v| *v /= n);
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub(crate) fn expect_dim(self, expected: usize) -> ProviderResult<Self> {
        if self.dim() == expected {
            Ok(self)
        } else {
            Err(ProviderError::DimensionMismatch {
                expected,
                got: self.dim(),
            })
        }
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbeddingVector(dim={})", self.values.len())
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = ProviderError;
    fn try_from(v: Vec<f64>) -> ProviderResult<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Probability that a hypothesis contradicts a premise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ContradictionProbability(f64);

impl ContradictionProbability {
    pub fn new(p: f64) -> ProviderResult<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(ProviderError::InvalidProbability(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ContradictionProbability {
    type Error = ProviderError;
    fn try_from(p: f64) -> ProviderResult<Self> {
        Self::new(p)
    }
}

impl From<ContradictionProbability> for f64 {
    fn from(p: ContradictionProbability) -> f64 {
        p.0
    }
}

pub trait ImageEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_image(&self, tile: &RgbImage) -> ProviderResult<EmbeddingVector>;

    fn embed_images(&self, tiles: &[&RgbImage]) -> ProviderResult<Vec<EmbeddingVector>> {
        tiles.iter().map(|t| self.embed_image(t)).collect()
    }
}

pub trait TextEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector>;

    fn embed_texts(&self, texts: &[&str]) -> ProviderResult<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

pub trait NliScorer: Send + Sync {
    fn id(&self) -> String;
    fn contradiction(&self, premise: &str, hypothesis: &str) -> ProviderResult<ContradictionProbability>;

    fn contradictions(&self, pairs: &[(&str, &str)]) -> ProviderResult<Vec<ContradictionProbability>> {
        pairs.iter().map(|(p, h)| self.contradiction(p, h)).collect()
    }
}

/// The model under evaluation.
pub trait Subject: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, image: &RgbImage, prompt: &str) -> ProviderResult<String>;
}

/// The full set of providers a case evaluation draws on.
#[derive(Clone)]
pub struct Providers {
    pub image: Arc<dyn ImageEmbedder>,
    pub text: Arc<dyn TextEmbedder>,
    pub nli: Arc<dyn NliScorer>,
    pub subject: Option<Arc<dyn Subject>>,
}

impl Providers {
    /// Seeded baseline set: hashed embedders of dimension `dim`, antonym-rule NLI
    /// and the lexicon-driven baseline subject.
    pub fn baseline(
        seed: u64,
        dim: usize,
        lexicon: &crate::lexicon::Lexicon,
        antonyms: &crate::lexicon::AntonymTable,
    ) -> Self {
        let image = BaselineImageEmbedder::new(seed, dim);
        let text = BaselineTextEmbedder::new(seed, dim);
        let subject = BaselineSubject::new(image.clone(), text.clone(), lexicon.clone());
        Self {
            image: Arc::new(image),
            text: Arc::new(text),
            nli: Arc::new(BaselineNli::new(antonyms.clone())),
            subject: Some(Arc::new(subject)),
        }
    }

    pub fn without_subject(mut self) -> Self {
        self.subject = None;
        self
    }
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers")
            .field("image", &self.image.id())
            .field("text", &self.text.id())
            .field("nli", &self.nli.id())
            .field("subject", &self.subject.as_ref().map(|s| s.id()))
            .finish()
    }
}
