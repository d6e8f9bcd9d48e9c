//! Synthetic two-stain tissue images and a self-consistent caption corpus.
//!
//! Pixels are rendered in optical-density space as `OD = h·c_h + e·c_e` and
//! converted with the exact inverse of the OD transform, so the stain vectors
//! used here are a ground truth for colour deconvolution.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::generators::{make_triple, PerturbedTriple};
use super::ExperimentError;
use crate::fusion::Evaluator;
use crate::hashing::fnv1a64;
use crate::lexicon::{Category, LexiconEntry};
use crate::providers::EmbeddingVector;
use crate::rng::SeededRng;
use crate::tessellate::{filter_background, tessellate};

/// Hematoxylin OD direction commonly used as the Macenko reference.
pub const REFERENCE_H: [f64; 3] = [0.5626, 0.7201, 0.4062];
/// Eosin OD direction commonly used as the Macenko reference.
pub const REFERENCE_E: [f64; 3] = [0.2159, 0.8012, 0.5581];

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Parameters of a rendered tissue image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    /// Fraction of near-white background pixels.
    pub background: f64,
    /// Fraction of pixels carrying a single stain (split evenly).
    pub pure: f64,
    /// Total stain amplitude range `c_h + c_e`.
    pub amplitude: (f64, f64),
    /// Share of hematoxylin in mixed pixels, in `(0, 1)`.
    pub hematoxylin_share: f64,
    /// Relative amplitude of a smooth spatial wave, `[0, 1)`.
    pub wave: f64,
    pub wave_frequency: (f64, f64),
    pub wave_phase: f64,
}

impl TissueSpec {
    /// Clean two-stain mixture: no background, 30 % single-stain pixels and
    /// amplitudes that keep every channel above the default tissue threshold.
    pub fn two_stain(h: [f64; 3], e: [f64; 3]) -> Self {
        Self {
            hematoxylin: h,
            eosin: e,
            background: 0.0,
            pure: 0.3,
            amplitude: (0.8, 1.6),
            hematoxylin_share: 0.5,
            wave: 0.0,
            wave_frequency: (1.0, 1.0),
            wave_phase: 0.0,
        }
    }

    /// Seeded variety for corpus images, using the reference stains.
    pub fn random(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Self {
            hematoxylin: REFERENCE_H,
            eosin: REFERENCE_E,
            background: rng.uniform(0.0, 0.3),
            pure: rng.uniform(0.1, 0.4),
            amplitude: {
                let lo = rng.uniform(0.5, 1.0);
                (lo, lo + rng.uniform(0.3, 1.0))
            },
            hematoxylin_share: rng.uniform(0.2, 0.8),
            wave: rng.uniform(0.0, 0.6),
            wave_frequency: (rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)),
            wave_phase: rng.uniform(0.0, std::f64::consts::TAU),
        }
    }
}

/// Renders `spec` at `width × height`; every random draw is made in row-major
/// pixel order from one generator seeded with `seed`.
pub fn render_tissue(width: u32, height: u32, spec: &TissueSpec, seed: u64) -> RgbImage {
    let (h, e) = (unit(spec.hematoxylin), unit(spec.eosin));
    let mut rng = SeededRng::new(seed);
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            if rng.next_f64() < spec.background {
                let v = 255 - rng.index(4) as u8;
                img.put_pixel(x, y, Rgb([v, v, v]));
                continue;
            }
            let class = rng.next_f64();
            let u = if class < spec.pure / 2.0 {
                1.0
            } else if class < spec.pure {
                0.0
            } else {
                rng.next_f64()
            };
            let phase = std::f64::consts::TAU
                * (spec.wave_frequency.0 * f64::from(x) / f64::from(width)
                    + spec.wave_frequency.1 * f64::from(y) / f64::from(height))
                + spec.wave_phase;
            let amp = rng.uniform(spec.amplitude.0, spec.amplitude.1) * (1.0 + spec.wave * phase.sin());
            let share = spec.hematoxylin_share;
            let (ch, ce) = (amp * u * 2.0 * share, amp * (1.0 - u) * 2.0 * (1.0 - share));
            let px = [0, 1, 2].map(|c| {
                let od = h[c] * ch + e[c] * ce;
                (255.0 * 10f64.powf(-od) - 1.0).clamp(0.0, 255.0).round() as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Clean mixture of the two given stain directions (see [`TissueSpec::two_stain`]).
pub fn two_stain_image(width: u32, height: u32, h: [f64; 3], e: [f64; 3], seed: u64) -> RgbImage {
    render_tissue(width, height, &TissueSpec::two_stain(h, e), seed)
}

fn sentence_case(s: &str) -> String {
    let mut cs = s.chars();
    match cs.next() {
        Some(f) => f.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub case_id: String,
    pub image: RgbImage,
    pub triple: PerturbedTriple,
}

/// Per-category lexicon terms ranked by how well the image grounds them
/// (max cosine over the case's patch bag, descending; ties in lexicon order).
pub fn rank_terms(
    image: &RgbImage,
    ev: &Evaluator,
    category: Category,
) -> Result<Vec<(LexiconEntry, f64)>, ExperimentError> {
    let cfg = &ev.config;
    let mut bag = tessellate(image, cfg.patch_size, cfg.stride)?;
    if let Some(b) = &cfg.background {
        bag = filter_background(&bag, b.saturation_threshold, b.min_tissue_fraction);
    }
    let patches = ev.providers.image.embed_images(&bag.tiles())?;
    let entries: Vec<&LexiconEntry> = ev.resources.lexicon.terms_in(category).collect();
    let terms: Vec<&str> = entries.iter().map(|e| e.term.as_str()).collect();
    let vecs = ev.providers.text.embed_texts(&terms)?;
    let best = |t: &EmbeddingVector| patches.iter().map(|p| p.cosine(t)).fold(f64::NEG_INFINITY, f64::max);
    let mut ranked: Vec<(LexiconEntry, f64)> = entries
        .into_iter()
        .zip(&vecs)
        .map(|(e, v)| (e.clone(), best(v)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ranked)
}

/// `n` synthetic cases of `size × size` pixels. Each control caption names the
/// best-grounded morphology, location and diagnosis for its image, with one
/// polar word in each sentence:
///
/// `"{Morphology} with {polar} features in the {location}. Consistent with {polar} {diagnosis}."`
///
/// The visual-hallucination pool is the less-grounded half of each category.
pub fn synthetic_corpus(n: usize, size: u32, seed: u64, ev: &Evaluator) -> Result<Vec<SyntheticCase>, ExperimentError> {
    (0..n)
        .map(|i| {
            let case_seed = fnv1a64(seed, "synthetic-case", &(i as u64).to_le_bytes());
            let image = render_tissue(size, size, &TissueSpec::random(case_seed), case_seed);
            let mut chosen = Vec::new();
            let mut pool = Vec::new();
            for cat in [Category::Morphology, Category::Location, Category::Diagnosis] {
                let ranked = rank_terms(&image, ev, cat)?;
                let (first, _) = ranked.first().ok_or(ExperimentError::NoReplacement)?;
                chosen.push(first.term.clone());
                pool.extend(ranked[ranked.len().div_ceil(2)..].iter().map(|(e, _)| e.clone()));
            }
            let polar = if SeededRng::new(case_seed).next_u64() & 1 == 0 {
                "malignant"
            } else {
                "benign"
            };
            let caption = format!(
                "{} with {polar} features in the {}. Consistent with {polar} {}.",
                sentence_case(&chosen[0]),
                chosen[1],
                chosen[2]
            );
            let triple = make_triple(
                &caption,
                &pool,
                &ev.resources.lexicon,
                &ev.resources.antonyms,
                case_seed,
            )?;
            Ok(SyntheticCase {
                case_id: format!("synth-{i:03}"),
                image,
                triple,
            })
        })
        .collect()
}
