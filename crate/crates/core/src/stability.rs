//! Adversarial stability: the subject regenerates its report under a stain
//! perturbation and under a misleading clinical history, and the semantic
//! drift of both regenerations is averaged.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ProviderError, Subject, TextEmbedder};
use crate::scalar::{mean, Scalar};
use crate::stain::{perturb_stains, MacenkoParams, PerturbationSpec, StainError};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("attack prompt needs a non-empty {0}")]
    EmptyInput(&'static str),
    #[error("semantic distance {0} is outside [0, 1]")]
    OutOfRangeDelta(f64),
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
    #[error("stain perturbation failed: {0}")]
    Stain(#[from] StainError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPrompt {
    pub base_prompt: String,
    pub false_history: String,
    pub rendered: String,
}

/// Renders `"Clinical history: {false_history}\n\n{base}"`.
pub fn build_attack_prompt(base: &str, false_history: &str) -> Result<AttackPrompt, StabilityError> {
    if base.trim().is_empty() {
        return Err(StabilityError::EmptyInput("base prompt"));
    }
    if false_history.trim().is_empty() {
        return Err(StabilityError::EmptyInput("false history"));
    }
    Ok(AttackPrompt {
        base_prompt: base.to_owned(),
        false_history: false_history.to_owned(),
        rendered: format!("Clinical history: {false_history}\n\n{base}"),
    })
}

/// `(1 − cos) / 2`, clamped to `[0, 1]`.
pub fn distance_from_cosine<T: Scalar>(cos: T) -> T {
    ((T::one() - cos) / T::lit(2.0)).clamp_to(T::zero(), T::one())
}

/// Cosine distance of the two texts' embeddings, normalized to `[0, 1]`.
/// Identical embeddings are exactly 0 apart, independent of rounding.
pub fn semantic_distance(a: &str, b: &str, text: &dyn TextEmbedder) -> Result<f64, StabilityError> {
    let va = text.embed_text(a)?;
    let vb = text.embed_text(b)?;
    if va == vb {
        return Ok(0.0);
    }
    Ok(distance_from_cosine(va.cosine(&vb)))
}

/// `1 − (Δ_aug + Δ_attack) / 2`.
pub fn stability_score<T: Scalar>(delta_aug: T, delta_attack: T) -> Result<T, StabilityError> {
    for d in [delta_aug, delta_attack] {
        if !(d >= T::zero() && d <= T::one()) {
            return Err(StabilityError::OutOfRangeDelta(d.as_f64()));
        }
    }
    Ok((T::one() - (delta_aug + delta_attack) / T::lit(2.0)).clamp_to(T::zero(), T::one()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityReports {
    pub original: String,
    pub augmented: String,
    pub attack: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub score: f64,
    pub delta_aug: f64,
    pub delta_attack: f64,
    pub reports: StabilityReports,
    pub attack_prompt: AttackPrompt,
    pub perturbation: PerturbationSpec,
    /// Regenerations for the extra ensemble seeds (`seed + 1, seed + 2, …`);
    /// empty in the default single-view mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble_augmented: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityOptions {
    pub perturbation: PerturbationSpec,
    pub macenko: MacenkoParams,
    /// Number of stain-perturbed views averaged into Δ_aug.
    pub ensemble: usize,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            perturbation: PerturbationSpec::default(),
            macenko: MacenkoParams::default(),
            ensemble: 1,
        }
    }
}

/// Runs the two perturbations against `subject`. `original` is the subject's
/// report for `(image, base_prompt)` when the caller already has it; it is
/// generated otherwise. The three generations run concurrently.
pub fn evaluate_stability(
    image: &RgbImage,
    base_prompt: &str,
    false_history: &str,
    original: Option<&str>,
    subject: &dyn Subject,
    text: &dyn TextEmbedder,
    options: &StabilityOptions,
) -> Result<StabilityResult, StabilityError> {
    if options.ensemble == 0 {
        return Err(StabilityError::EmptyEnsemble);
    }
    let attack = build_attack_prompt(base_prompt, false_history)?;
    let specs: Vec<PerturbationSpec> = (0..options.ensemble as u64)
        .map(|i| PerturbationSpec {
            seed: options.perturbation.seed.wrapping_add(i),
            ..options.perturbation
        })
        .collect();
    let views = specs
        .iter()
        .map(|s| perturb_stains::<f64>(image, s, &options.macenko))
        .collect::<Result<Vec<_>, _>>()?;

    let ((r_orig, r_attack), r_aug) = rayon::join(
        || {
            rayon::join(
                || match original {
                    Some(r) => Ok(r.to_owned()),
                    None => subject.generate(image, base_prompt),
                },
                || subject.generate(image, &attack.rendered),
            )
        },
        || {
            views
                .iter()
                .map(|v| subject.generate(v, base_prompt))
                .collect::<Result<Vec<_>, _>>()
        },
    );
    let (r_orig, r_attack, mut r_aug) = (r_orig?, r_attack?, r_aug?);

    let aug_deltas = r_aug
        .iter()
        .map(|r| semantic_distance(&r_orig, r, text))
        .collect::<Result<Vec<_>, _>>()?;
    let delta_aug = mean(&aug_deltas).expect("ensemble is non-empty");
    let delta_attack = semantic_distance(&r_orig, &r_attack, text)?;
    let score = stability_score(delta_aug, delta_attack)?;
    let ensemble_augmented = r_aug.split_off(1);
    Ok(StabilityResult {
        score,
        delta_aug,
        delta_attack,
        reports: StabilityReports {
            original: r_orig,
            augmented: r_aug.pop().expect("one view"),
            attack: r_attack,
        },
        attack_prompt: attack,
        perturbation: options.perturbation,
        ensemble_augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::synthetic::{two_stain_image, REFERENCE_E, REFERENCE_H};
    use crate::providers::{BaselineTextEmbedder, ProviderResult};

    struct Constant(&'static str);

    impl Subject for Constant {
        fn id(&self) -> String {
            "constant".into()
        }
        fn generate(&self, _: &RgbImage, _: &str) -> ProviderResult<String> {
            Ok(self.0.into())
        }
    }

    /// Echoes whether the prompt carried a clinical history.
    struct HistoryFollower;

    impl Subject for HistoryFollower {
        fn id(&self) -> String {
            "follower".into()
        }
        fn generate(&self, _: &RgbImage, p: &str) -> ProviderResult<String> {
            Ok(if p.starts_with("Clinical history") {
                "Consistent with malignant melanoma.".into()
            } else {
                "Consistent with benign nevus.".into()
            })
        }
    }

    #[test]
    fn attack_prompt_template() {
        let a = build_attack_prompt("Describe the slide.", "Patient has confirmed metastatic melanoma.").unwrap();
        assert_eq!(
            a.rendered,
            "Clinical history: Patient has confirmed metastatic melanoma.\n\nDescribe the slide."
        );
        assert_eq!(
            a,
            build_attack_prompt("Describe the slide.", "Patient has confirmed metastatic melanoma.").unwrap()
        );
        assert!(build_attack_prompt("", "x").is_err());
        assert!(build_attack_prompt("x", " ").is_err());
    }

    #[test]
    fn score_formula() {
        assert_eq!(stability_score(0.0, 0.0).unwrap(), 1.0);
        assert!((stability_score(0.1f64, 0.3).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(stability_score(1.0f32, 1.0).unwrap(), 0.0);
        assert!(stability_score(1.1, 0.0).is_err());
        assert_eq!(distance_from_cosine(1.0), 0.0);
        assert_eq!(distance_from_cosine(0.0), 0.5);
        assert_eq!(distance_from_cosine(-1.0), 1.0);
    }

    #[test]
    fn distance_properties() {
        let t = BaselineTextEmbedder::new(7, 64);
        assert_eq!(semantic_distance("same text", "same text", &t).unwrap(), 0.0);
        let ab = semantic_distance("malignant lymphoma", "benign nevus", &t).unwrap();
        let ba = semantic_distance("benign nevus", "malignant lymphoma", &t).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn constant_subject_is_perfectly_stable() {
        let img = two_stain_image(48, 48, REFERENCE_H, REFERENCE_E, 1);
        let t = BaselineTextEmbedder::new(7, 64);
        let opts = StabilityOptions::default();
        let r = evaluate_stability(&img, "Describe.", "History.", None, &Constant("Same."), &t, &opts).unwrap();
        assert_eq!(r.score, 1.0);
        let big = StabilityOptions {
            perturbation: PerturbationSpec {
                alpha_sigma: 1.0,
                beta_sigma: 0.5,
                seed: 3,
            },
            ensemble: 3,
            ..opts
        };
        let r = evaluate_stability(&img, "Describe.", "History.", None, &Constant("Same."), &t, &big).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.ensemble_augmented.len(), 2);
    }

    #[test]
    fn attack_flip_costs_half_the_distance() {
        let img = two_stain_image(48, 48, REFERENCE_H, REFERENCE_E, 2);
        let t = BaselineTextEmbedder::new(7, 64);
        let r = evaluate_stability(
            &img,
            "Describe.",
            "History.",
            None,
            &HistoryFollower,
            &t,
            &StabilityOptions::default(),
        )
        .unwrap();
        let d = semantic_distance(
            "Consistent with benign nevus.",
            "Consistent with malignant melanoma.",
            &t,
        )
        .unwrap();
        assert_eq!(r.delta_aug, 0.0);
        assert_eq!(r.score, 1.0 - d / 2.0);
        let again = evaluate_stability(
            &img,
            "Describe.",
            "History.",
            None,
            &HistoryFollower,
            &t,
            &StabilityOptions::default(),
        )
        .unwrap();
        assert_eq!(r, again);
    }
}
