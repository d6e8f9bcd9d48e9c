//! Deterministic seeded providers with no learned weights.
//!
//! They are not meant to be accurate; they are meant to be predictable, so
//! that every downstream score can be traced by hand in tests.

use std::collections::BTreeSet;

use image::RgbImage;

use super::{
    ContradictionProbability, EmbeddingVector, ImageEmbedder, NliScorer, ProviderError, ProviderResult, Subject,
    TextEmbedder,
};
use crate::grounding::extract_entities;
use crate::hashing::fnv1a64;
use crate::lexicon::{AntonymTable, Category, Lexicon};
use crate::text::{match_case, normalize, words};

pub const DEFAULT_DIM: usize = 64;
pub const NGRAM: usize = 3;

fn bucket(h: u64, dim: usize) -> (usize, f64) {
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    ((h % dim as u64) as usize, sign)
}

/// Feature-hashed character trigrams of the normalized text.
///
/// Each trigram `g` of `normalize(text)` hashes with
/// `fnv1a64(seed, "text3", g)` to bucket `h % dim` and sign `(-1)^(h >> 63)`;
/// the bucket counts are L2-normalized. Texts shorter than three characters
/// contribute themselves as a single gram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineTextEmbedder {
    seed: u64,
    dim: usize,
}

impl BaselineTextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl TextEmbedder for BaselineTextEmbedder {
    fn id(&self) -> String {
        format!("baseline-text/trigram-hash/seed={}/dim={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let chars: Vec<char> = norm.chars().collect();
        let mut acc = vec![0.0f64; self.dim];
        let mut add = |gram: &[char]| {
            let g: String = gram.iter().collect();
            let (i, s) = bucket(fnv1a64(self.seed, "text3", g.as_bytes()), self.dim);
            acc[i] += s;
        };
        if chars.len() < NGRAM {
            add(&chars);
        } else {
            chars.windows(NGRAM).for_each(&mut add);
        }
        if acc.iter().all(|&v| v == 0.0) {
            let (i, _) = bucket(fnv1a64(self.seed, "text-fallback", norm.as_bytes()), self.dim);
            acc[i] = 1.0;
        }
        EmbeddingVector::normalize(acc)
    }
}

/// Hashed global colour statistics of a tile.
///
/// Features, in order: per-channel mean / 255 − 0.5 (R, G, B), per-channel
/// 4·variance / 255² − 0.1, then the 4×4 grid of mean luminance
/// (0.299R + 0.587G + 0.114B) / 255 − 0.5 in row-major order. Feature `k`
/// is added to bucket `fnv1a64(seed, "img", k_le_bytes) % dim` with the
/// hash's top-bit sign, and the result is L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineImageEmbedder {
    seed: u64,
    dim: usize,
}

pub const IMAGE_FEATURES: usize = 3 + 3 + 16;

impl BaselineImageEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }

    pub fn features(tile: &RgbImage) -> ProviderResult<[f64; IMAGE_FEATURES]> {
        let (w, h) = tile.dimensions();
        if w == 0 || h == 0 {
            return Err(ProviderError::EmptyImage);
        }
        let n = f64::from(w) * f64::from(h);
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for p in tile.pixels() {
            for c in 0..3 {
                let v = f64::from(p.0[c]);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let mut f = [0.0f64; IMAGE_FEATURES];
        for c in 0..3 {
            let m = sum[c] / n;
            let var = (sq[c] / n - m * m).max(0.0);
            f[c] = m / 255.0 - 0.5;
            f[3 + c] = 4.0 * var / (255.0 * 255.0) - 0.1;
        }
        let cell = |i: u32, len: u32| -> (u32, u32) {
            let lo = i * len / 4;
            let hi = ((i + 1) * len / 4).max(lo + 1).min(len);
            (lo.min(len - 1), hi)
        };
        for gy in 0..4u32 {
            let (y0, y1) = cell(gy, h);
            for gx in 0..4u32 {
                let (x0, x1) = cell(gx, w);
                let mut s = 0.0;
                let mut cnt = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = tile.get_pixel(x, y).0;
                        s += 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                        cnt += 1.0;
                    }
                }
                f[6 + (gy * 4 + gx) as usize] = s / cnt / 255.0 - 0.5;
            }
        }
        Ok(f)
    }
}

impl ImageEmbedder for BaselineImageEmbedder {
    fn id(&self) -> String {
        format!("baseline-image/stat-hash/seed={}/dim={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, tile: &RgbImage) -> ProviderResult<EmbeddingVector> {
        let f = Self::features(tile)?;
        let mut acc = vec![0.0f64; self.dim];
        for (k, v) in f.iter().enumerate() {
            let (i, s) = bucket(fnv1a64(self.seed, "img", &(k as u64).to_le_bytes()), self.dim);
            acc[i] += s * v;
        }
        if acc.iter().all(|&v| v == 0.0) {
            let (i, _) = bucket(fnv1a64(self.seed, "img-fallback", &[]), self.dim);
            acc[i] = 1.0;
        }
        EmbeddingVector::normalize(acc)
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "by", "with", "and", "or", "is", "are", "was", "were", "be", "been",
    "to", "for", "as", "this", "that", "these", "those", "there", "it", "its", "show", "shows", "seen", "noted",
    "features",
];

/// Rule-based contradiction scorer.
///
/// 1. Identical normalized texts: 0.0.
/// 2. Premise holds a polar term whose antonym appears in the hypothesis (and
///    neither side holds both): 1.0.
/// 3. Every content word of the hypothesis also occurs in the premise
///    (same head noun, no new modifiers): 0.0.
/// 4. Otherwise 0.5.
#[derive(Debug, Clone)]
pub struct BaselineNli {
    antonyms: AntonymTable,
}

pub const NLI_NEUTRAL: f64 = 0.5;

impl BaselineNli {
    pub fn new(antonyms: AntonymTable) -> Self {
        Self { antonyms }
    }

    fn has_phrase(tokens: &[String], phrase: &str) -> bool {
        let p = words(phrase);
        !p.is_empty() && tokens.windows(p.len()).any(|w| w == p.as_slice())
    }

    fn content(tokens: &[String]) -> BTreeSet<&str> {
        tokens
            .iter()
            .map(String::as_str)
            .filter(|w| !STOP_WORDS.contains(w))
            .collect()
    }
}

impl NliScorer for BaselineNli {
    fn id(&self) -> String {
        "baseline-nli/antonym-rule".into()
    }

    fn contradiction(&self, premise: &str, hypothesis: &str) -> ProviderResult<ContradictionProbability> {
        let (p, h) = (normalize(premise), normalize(hypothesis));
        if p.is_empty() || h.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        if p == h {
            return ContradictionProbability::new(0.0);
        }
        let (pw, hw) = (words(&p), words(&h));
        let flipped = self.antonyms.polar_terms().any(|(a, b)| {
            Self::has_phrase(&pw, a)
                && Self::has_phrase(&hw, b)
                && !Self::has_phrase(&pw, b)
                && !Self::has_phrase(&hw, a)
        });
        if flipped {
            return ContradictionProbability::new(1.0);
        }
        let (pc, hc) = (Self::content(&pw), Self::content(&hw));
        if !hc.is_empty() && hc.is_subset(&pc) {
            return ContradictionProbability::new(0.0);
        }
        ContradictionProbability::new(NLI_NEUTRAL)
    }
}

/// Lexicon-driven stand-in for a report-generating model.
///
/// It embeds the whole image with the baseline image embedder and, for each
/// of morphology, location and diagnosis, picks the lexicon term whose text
/// embedding is most similar (ties: lexicon order). Polarity is "malignant"
/// when mean luminance is below 60 % of full scale, else "benign". A
/// diagnosis, location or polar term named in the prompt overrides the
/// image-derived choice, which is how a false clinical history biases it.
///
/// The report template is
/// `"{Morphology} with {polar} features in the {location}. Consistent with {polar} {diagnosis}."`
#[derive(Debug, Clone)]
pub struct BaselineSubject {
    image: BaselineImageEmbedder,
    lexicon: Lexicon,
    term_vectors: Vec<(Category, String, EmbeddingVector)>,
}

impl BaselineSubject {
    pub fn new(image: BaselineImageEmbedder, text: BaselineTextEmbedder, lexicon: Lexicon) -> Self {
        let term_vectors = lexicon
            .entries()
            .iter()
            .filter(|e| {
                matches!(
                    e.category,
                    Category::Morphology | Category::Location | Category::Diagnosis
                )
            })
            .map(|e| {
                let v = text.embed_text(&e.term).expect("lexicon terms are non-empty");
                (e.category, e.term.clone(), v)
            })
            .collect();
        Self {
            image,
            lexicon,
            term_vectors,
        }
    }

    fn best_term(&self, category: Category, v: &EmbeddingVector) -> Option<&str> {
        let mut best: Option<(f64, &str)> = None;
        for (c, term, tv) in &self.term_vectors {
            if *c != category {
                continue;
            }
            let s = tv.cosine(v);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, term));
            }
        }
        best.map(|(_, t)| t)
    }
}

impl Subject for BaselineSubject {
    fn id(&self) -> String {
        format!("baseline-subject/{}", self.image.id())
    }

    fn generate(&self, image: &RgbImage, prompt: &str) -> ProviderResult<String> {
        if normalize(prompt).is_empty() {
            return Err(ProviderError::EmptyPrompt);
        }
        let v = self.image.embed_image(image)?;
        let prompted = extract_entities(prompt, &self.lexicon);
        let from_prompt = |c: Category| {
            prompted
                .entities
                .iter()
                .find(|e| e.category == c)
                .map(|e| e.term.clone())
        };
        let pick = |c: Category| -> ProviderResult<String> {
            from_prompt(c)
                .or_else(|| self.best_term(c, &v).map(str::to_owned))
                .ok_or_else(|| ProviderError::EmptyGeneration(format!("lexicon has no {c} terms")))
        };
        let morphology = pick(Category::Morphology)?;
        let location = pick(Category::Location)?;
        let diagnosis = pick(Category::Diagnosis)?;

        let prompt_words = words(prompt);
        let polar = if prompt_words.iter().any(|w| w == "benign") {
            "benign"
        } else if prompt_words.iter().any(|w| w == "malignant" || w == "metastatic") {
            "malignant"
        } else {
            let (w, h) = image.dimensions();
            let lum: f64 = image
                .pixels()
                .map(|p| 0.299 * f64::from(p.0[0]) + 0.587 * f64::from(p.0[1]) + 0.114 * f64::from(p.0[2]))
                .sum::<f64>()
                / (f64::from(w) * f64::from(h));
            if lum < 0.6 * 255.0 {
                "malignant"
            } else {
                "benign"
            }
        };
        Ok(format!(
            "{} with {polar} features in the {location}. Consistent with {polar} {diagnosis}.",
            match_case("X", &morphology)
        ))
    }
}
