//! Record/replay of provider traffic.
//!
//! A transcript is a JSON Lines file; each line is
//! `{"provider": <role>, "key": <sha256-hex>, "response": <json>}` where role
//! is one of `embed_text`, `embed_image`, `nli`, `generate`. An optional line
//! with provider `meta` and key `seed` carries the seed the recording was made
//! with. Lines are written sorted by (provider, key), so a transcript of the
//! same session is byte-identical across runs.
//!
//! Request keys:
//! * `embed_text`: sha256 of the normalized text.
//! * `embed_image`: [`crate::hashing::image_hash`] of the tile.
//! * `nli`: sha256 of the JSON array `[premise, hypothesis]`.
//! * `generate`: sha256 of `image_hash + "\n" + prompt`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{
    ContradictionProbability, EmbeddingVector, ImageEmbedder, NliScorer, ProviderError, ProviderResult, Providers,
    Subject, TextEmbedder,
};
use crate::hashing::{image_hash, sha256_hex};
use crate::text::normalize;

pub const EMBED_TEXT: &str = "embed_text";
pub const EMBED_IMAGE: &str = "embed_image";
pub const NLI: &str = "nli";
pub const GENERATE: &str = "generate";
const META: &str = "meta";

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("conflicting transcript entries for {provider}/{key}")]
    Conflict { provider: String, key: String },
    #[error("transcript io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub mod keys {
    use super::*;

    pub fn embed_text(text: &str) -> String {
        sha256_hex(normalize(text).as_bytes())
    }

    pub fn embed_image(tile: &RgbImage) -> String {
        image_hash(tile)
    }

    pub fn nli(premise: &str, hypothesis: &str) -> String {
        let body = serde_json::to_vec(&[premise, hypothesis]).expect("strings serialize");
        sha256_hex(&body)
    }

    pub fn generate(image: &RgbImage, prompt: &str) -> String {
        sha256_hex(format!("{}\n{}", image_hash(image), prompt).as_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    provider: String,
    key: String,
    response: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProviderTranscript {
    pub seed: Option<u64>,
    entries: BTreeMap<(String, String), Value>,
}

impl ProviderTranscript {
    pub fn new(seed: Option<u64>) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, provider: &str, key: &str, response: Value) -> Result<(), TranscriptError> {
        let k = (provider.to_owned(), key.to_owned());
        match self.entries.get(&k) {
            Some(existing) if *existing != response => Err(TranscriptError::Conflict {
                provider: k.0,
                key: k.1,
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(k, response);
                Ok(())
            }
        }
    }

    pub fn get(&self, provider: &str, key: &str) -> Option<&Value> {
        self.entries.get(&(provider.to_owned(), key.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, provider: &str) -> usize {
        self.entries.keys().filter(|(p, _)| p == provider).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |provider: &str, key: &str, response: &Value| {
            let line = Line {
                provider: provider.to_owned(),
                key: key.to_owned(),
                response: response.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("transcript line serializes"));
            out.push('\n');
        };
        if let Some(seed) = self.seed {
            push(META, "seed", &Value::from(seed));
        }
        for ((p, k), v) in &self.entries {
            push(p, k, v);
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut t = Self::default();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if line.provider == META {
                if line.key == "seed" {
                    t.seed = line.response.as_u64();
                }
                continue;
            }
            t.insert(&line.provider, &line.key, line.response)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TranscriptError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// sha256 of the canonical JSONL form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Wraps live providers and logs every response.
pub struct TranscriptRecorder {
    inner: Providers,
    log: Mutex<ProviderTranscript>,
}

impl TranscriptRecorder {
    pub fn new(inner: Providers, seed: Option<u64>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            log: Mutex::new(ProviderTranscript::new(seed)),
        })
    }

    pub fn transcript(&self) -> ProviderTranscript {
        self.log.lock().expect("transcript lock").clone()
    }

    /// Provider set routing every call through this recorder.
    pub fn providers(self: &Arc<Self>) -> Providers {
        Providers {
            image: self.clone(),
            text: self.clone(),
            nli: self.clone(),
            subject: self.inner.subject.as_ref().map(|_| self.clone() as Arc<dyn Subject>),
        }
    }

    fn record<T: Serialize>(&self, provider: &str, key: String, value: &T) -> ProviderResult<()> {
        let v = serde_json::to_value(value).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        self.log
            .lock()
            .expect("transcript lock")
            .insert(provider, &key, v)
            .map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

impl ImageEmbedder for TranscriptRecorder {
    fn id(&self) -> String {
        format!("record({})", self.inner.image.id())
    }
    fn dim(&self) -> usize {
        self.inner.image.dim()
    }
    fn embed_image(&self, tile: &RgbImage) -> ProviderResult<EmbeddingVector> {
        let v = self.inner.image.embed_image(tile)?;
        self.record(EMBED_IMAGE, keys::embed_image(tile), &v)?;
        Ok(v)
    }
    fn embed_images(&self, tiles: &[&RgbImage]) -> ProviderResult<Vec<EmbeddingVector>> {
        let vs = self.inner.image.embed_images(tiles)?;
        for (t, v) in tiles.iter().zip(&vs) {
            self.record(EMBED_IMAGE, keys::embed_image(t), v)?;
        }
        Ok(vs)
    }
}

impl TextEmbedder for TranscriptRecorder {
    fn id(&self) -> String {
        format!("record({})", self.inner.text.id())
    }
    fn dim(&self) -> usize {
        self.inner.text.dim()
    }
    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        let v = self.inner.text.embed_text(text)?;
        self.record(EMBED_TEXT, keys::embed_text(text), &v)?;
        Ok(v)
    }
    fn embed_texts(&self, texts: &[&str]) -> ProviderResult<Vec<EmbeddingVector>> {
        let vs = self.inner.text.embed_texts(texts)?;
        for (t, v) in texts.iter().zip(&vs) {
            self.record(EMBED_TEXT, keys::embed_text(t), v)?;
        }
        Ok(vs)
    }
}

impl NliScorer for TranscriptRecorder {
    fn id(&self) -> String {
        format!("record({})", self.inner.nli.id())
    }
    fn contradiction(&self, premise: &str, hypothesis: &str) -> ProviderResult<ContradictionProbability> {
        let p = self.inner.nli.contradiction(premise, hypothesis)?;
        self.record(NLI, keys::nli(premise, hypothesis), &p)?;
        Ok(p)
    }
}

impl Subject for TranscriptRecorder {
    fn id(&self) -> String {
        let inner = self.inner.subject.as_ref().map(|s| s.id()).unwrap_or_default();
        format!("record({inner})")
    }
    fn generate(&self, image: &RgbImage, prompt: &str) -> ProviderResult<String> {
        let subject = self
            .inner
            .subject
            .as_ref()
            .ok_or_else(|| ProviderError::EmptyGeneration("no subject behind recorder".into()))?;
        let text = subject.generate(image, prompt)?;
        self.record(GENERATE, keys::generate(image, prompt), &text)?;
        Ok(text)
    }
}

/// Serves responses from a transcript; any request it has not seen is an error.
#[derive(Debug, Clone)]
pub struct TranscriptReplayer {
    transcript: Arc<ProviderTranscript>,
    dim: usize,
}

impl TranscriptReplayer {
    pub fn new(transcript: ProviderTranscript, dim: usize) -> Arc<Self> {
        Arc::new(Self {
            transcript: Arc::new(transcript),
            dim,
        })
    }

    pub fn transcript(&self) -> &ProviderTranscript {
        &self.transcript
    }

    /// Provider set served entirely from the transcript. The subject is
    /// present only if the transcript holds at least one generation.
    pub fn providers(self: &Arc<Self>) -> Providers {
        let has_subject = self.transcript.count(GENERATE) > 0;
        Providers {
            image: self.clone(),
            text: self.clone(),
            nli: self.clone(),
            subject: has_subject.then(|| self.clone() as Arc<dyn Subject>),
        }
    }

    fn lookup(&self, provider: &str, key: String) -> ProviderResult<&Value> {
        self.transcript
            .get(provider, &key)
            .ok_or(ProviderError::TranscriptMiss {
                provider: provider.to_owned(),
                key,
            })
    }

    fn vector(&self, provider: &str, key: String) -> ProviderResult<EmbeddingVector> {
        let v: EmbeddingVector = serde_json::from_value(self.lookup(provider, key)?.clone())
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        v.expect_dim(self.dim)
    }
}

impl ImageEmbedder for TranscriptReplayer {
    fn id(&self) -> String {
        format!("replay(image,{})", &self.transcript.digest()[..12])
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_image(&self, tile: &RgbImage) -> ProviderResult<EmbeddingVector> {
        self.vector(EMBED_IMAGE, keys::embed_image(tile))
    }
}

impl TextEmbedder for TranscriptReplayer {
    fn id(&self) -> String {
        format!("replay(text,{})", &self.transcript.digest()[..12])
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        if normalize(text).is_empty() {
            return Err(ProviderError::EmptyText);
        }
        self.vector(EMBED_TEXT, keys::embed_text(text))
    }
}

impl NliScorer for TranscriptReplayer {
    fn id(&self) -> String {
        format!("replay(nli,{})", &self.transcript.digest()[..12])
    }
    fn contradiction(&self, premise: &str, hypothesis: &str) -> ProviderResult<ContradictionProbability> {
        serde_json::from_value(self.lookup(NLI, keys::nli(premise, hypothesis))?.clone())
            .map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

impl Subject for TranscriptReplayer {
    fn id(&self) -> String {
        format!("replay(subject,{})", &self.transcript.digest()[..12])
    }
    fn generate(&self, image: &RgbImage, prompt: &str) -> ProviderResult<String> {
        let key = keys::generate(image, prompt);
        match self.transcript.get(GENERATE, &key) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(_) => Err(ProviderError::EmptyGeneration(format!(
                "entry {key} is not a non-empty string"
            ))),
            None => Err(ProviderError::EmptyGeneration(format!(
                "no recorded generation for key {key}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{AntonymTable, Lexicon};
    use image::Rgb;

    fn baseline() -> Providers {
        Providers::baseline(7, 64, &Lexicon::default_pathology(), &AntonymTable::default_table())
    }

    #[test]
    fn record_then_replay_is_exact() {
        let rec = TranscriptRecorder::new(baseline(), Some(7));
        let live = rec.providers();
        let img = RgbImage::from_pixel(16, 16, Rgb([200, 100, 160]));
        let v = live.image.embed_image(&img).unwrap();
        let t = live.text.embed_text("Atypical cells").unwrap();
        let p = live
            .nli
            .contradiction("lesion is malignant", "lesion is benign")
            .unwrap();
        let g = live.subject.as_ref().unwrap().generate(&img, "Describe.").unwrap();

        let jsonl = rec.transcript().to_jsonl();
        let back = ProviderTranscript::parse_jsonl(&jsonl).unwrap();
        assert_eq!(back.seed, Some(7));
        assert_eq!(back.to_jsonl(), jsonl);

        let replay = TranscriptReplayer::new(back, 64).providers();
        assert_eq!(replay.image.embed_image(&img).unwrap(), v);
        assert_eq!(replay.text.embed_text("atypical   CELLS").unwrap(), t);
        assert_eq!(
            replay
                .nli
                .contradiction("lesion is malignant", "lesion is benign")
                .unwrap(),
            p
        );
        assert_eq!(replay.subject.as_ref().unwrap().generate(&img, "Describe.").unwrap(), g);
    }

    #[test]
    fn replay_keys_on_image_and_prompt() {
        let mut t = ProviderTranscript::new(None);
        let a = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(4, 4, Rgb([3, 2, 1]));
        t.insert(GENERATE, &keys::generate(&a, "P"), Value::from("report A"))
            .unwrap();
        let r = TranscriptReplayer::new(t, 64);
        assert_eq!(r.generate(&a, "P").unwrap(), "report A");
        assert!(matches!(r.generate(&a, "Q"), Err(ProviderError::EmptyGeneration(_))));
        assert!(matches!(r.generate(&b, "P"), Err(ProviderError::EmptyGeneration(_))));
        assert!(matches!(r.embed_text("x"), Err(ProviderError::TranscriptMiss { .. })));
    }

    #[test]
    fn replay_checks_dimension() {
        let mut t = ProviderTranscript::new(None);
        t.insert(EMBED_TEXT, &keys::embed_text("x"), serde_json::json!([0.6, 0.8]))
            .unwrap();
        let r = TranscriptReplayer::new(t, 64);
        assert_eq!(
            r.embed_text("x"),
            Err(ProviderError::DimensionMismatch { expected: 64, got: 2 })
        );
    }

    #[test]
    fn conflicts_and_parse_errors() {
        let mut t = ProviderTranscript::new(None);
        t.insert(NLI, "k", Value::from(0.5)).unwrap();
        t.insert(NLI, "k", Value::from(0.5)).unwrap();
        assert!(matches!(
            t.insert(NLI, "k", Value::from(1.0)),
            Err(TranscriptError::Conflict { .. })
        ));
        assert!(matches!(
            ProviderTranscript::parse_jsonl("{\"provider\":1}\n"),
            Err(TranscriptError::Parse { line: 1, .. })
        ));
    }
}
