//! Blocking HTTP client for the provider wire protocol.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::*;
use super::{
    ContradictionProbability, EmbeddingVector, ImageEmbedder, NliScorer, ProviderError, ProviderResult, Providers,
    Subject, TextEmbedder,
};
use crate::text::normalize;

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.max {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSettings {
    pub endpoint: String,
    pub dim: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub token: Option<String>,
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}
fn default_batch() -> usize {
    32
}

/// One client speaking all four endpoints of a provider server.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    settings: RemoteSettings,
    client: reqwest::blocking::Client,
    limit: Arc<InFlight>,
}

impl RemoteProvider {
    /// Must not be called from inside an async runtime.
    pub fn new(settings: RemoteSettings) -> ProviderResult<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs.max(1)))
            .build()
            .map_err(|e| ProviderError::Unreachable {
                provider: settings.endpoint.clone(),
                detail: e.to_string(),
            })?;
        Ok(Self {
            limit: Arc::new(InFlight::new(settings.max_in_flight)),
            settings,
            client,
        })
    }

    pub fn settings(&self) -> &RemoteSettings {
        &self.settings
    }

    /// All four roles served by this endpoint.
    pub fn providers(self) -> Providers {
        let me = Arc::new(self);
        Providers {
            image: me.clone(),
            text: me.clone(),
            nli: me.clone(),
            subject: Some(me),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> ProviderResult<Resp> {
        let url = format!("{}{}", self.settings.endpoint.trim_end_matches('/'), path);
        let unreachable = |detail: String| ProviderError::Unreachable {
            provider: url.clone(),
            detail,
        };
        let _permit = self.limit.acquire();
        let mut req = self.client.post(&url).json(body);
        if let Some(token) = &self.settings.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let detail = resp
                .json::<ErrorBody>()
                .map(|b| b.error)
                .unwrap_or_else(|_| status.to_string());
            return Err(if status.is_server_error() {
                unreachable(format!("{status}: {detail}"))
            } else {
                ProviderError::Protocol(format!("{status}: {detail}"))
            });
        }
        resp.json::<Resp>()
            .map_err(|e| ProviderError::Protocol(format!("{url}: {e}")))
    }

    fn vectors(&self, resp: EmbedResponse, expected: usize) -> ProviderResult<Vec<EmbeddingVector>> {
        if resp.vectors.len() != expected {
            return Err(ProviderError::Protocol(format!(
                "asked for {expected} vectors, got {}",
                resp.vectors.len()
            )));
        }
        if resp.dim != self.settings.dim {
            return Err(ProviderError::DimensionMismatch {
                expected: self.settings.dim,
                got: resp.dim,
            });
        }
        resp.vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(v)?.expect_dim(self.settings.dim))
            .collect()
    }
}

impl TextEmbedder for RemoteProvider {
    fn id(&self) -> String {
        format!("remote({})", self.settings.endpoint)
    }
    fn dim(&self) -> usize {
        self.settings.dim
    }
    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        Ok(self.embed_texts(&[text])?.remove(0))
    }
    fn embed_texts(&self, texts: &[&str]) -> ProviderResult<Vec<EmbeddingVector>> {
        let normalized: Vec<String> = texts.iter().map(|t| normalize(t)).collect();
        if normalized.iter().any(String::is_empty) {
            return Err(ProviderError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in normalized.chunks(self.settings.batch_size.max(1)) {
            let resp: EmbedResponse = self.post(PATH_EMBED_TEXT, &EmbedTextRequest { texts: chunk.to_vec() })?;
            out.extend(self.vectors(resp, chunk.len())?);
        }
        Ok(out)
    }
}

impl ImageEmbedder for RemoteProvider {
    fn id(&self) -> String {
        format!("remote({})", self.settings.endpoint)
    }
    fn dim(&self) -> usize {
        self.settings.dim
    }
    fn embed_image(&self, tile: &RgbImage) -> ProviderResult<EmbeddingVector> {
        Ok(self.embed_images(&[tile])?.remove(0))
    }
    fn embed_images(&self, tiles: &[&RgbImage]) -> ProviderResult<Vec<EmbeddingVector>> {
        if tiles.iter().any(|t| t.width() == 0 || t.height() == 0) {
            return Err(ProviderError::EmptyImage);
        }
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(self.settings.batch_size.max(1)) {
            let body = EmbedImageRequest {
                images_png_b64: chunk.iter().map(|t| encode_png_b64(t)).collect(),
            };
            let resp: EmbedResponse = self.post(PATH_EMBED_IMAGE, &body)?;
            out.extend(self.vectors(resp, chunk.len())?);
        }
        Ok(out)
    }
}

impl NliScorer for RemoteProvider {
    fn id(&self) -> String {
        format!("remote({})", self.settings.endpoint)
    }
    fn contradiction(&self, premise: &str, hypothesis: &str) -> ProviderResult<ContradictionProbability> {
        Ok(self.contradictions(&[(premise, hypothesis)])?.remove(0))
    }
    fn contradictions(&self, pairs: &[(&str, &str)]) -> ProviderResult<Vec<ContradictionProbability>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.settings.batch_size.max(1)) {
            let body = NliRequest {
                pairs: chunk
                    .iter()
                    .map(|(p, h)| NliPair {
                        premise: (*p).to_owned(),
                        hypothesis: (*h).to_owned(),
                    })
                    .collect(),
            };
            let resp: NliResponse = self.post(PATH_NLI, &body)?;
            if resp.contradiction.len() != chunk.len() {
                return Err(ProviderError::Protocol("nli response length mismatch".into()));
            }
            for p in resp.contradiction {
                out.push(ContradictionProbability::new(p)?);
            }
        }
        Ok(out)
    }
}

impl Subject for RemoteProvider {
    fn id(&self) -> String {
        format!("remote({})", self.settings.endpoint)
    }
    fn generate(&self, image: &RgbImage, prompt: &str) -> ProviderResult<String> {
        let body = GenerateRequest {
            image_png_b64: encode_png_b64(image),
            prompt: prompt.to_owned(),
        };
        let resp: GenerateResponse = self.post(PATH_GENERATE, &body)?;
        if resp.text.trim().is_empty() {
            return Err(ProviderError::EmptyGeneration(
                "remote subject returned empty text".into(),
            ));
        }
        Ok(resp.text)
    }
}
