//! Sensitivity of S_g and S_ℓ to the two perturbation groups.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generators::{PerturbedTriple, Variant};
use super::stats::sensitivity_delta;
use super::ExperimentError;
use crate::fusion::{CaseInput, Evaluator, StabilityMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub s_g: f64,
    pub s_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSensitivity {
    pub case_id: String,
    pub control: TextScores,
    pub visual_hallucination: TextScores,
    pub logic_error: TextScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    /// `s_g` or `s_l`.
    pub metric: String,
    pub group: Variant,
    pub control_mean: f64,
    pub perturbed_mean: f64,
    pub delta_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub cases: usize,
    pub rows: Vec<SensitivityRow>,
    pub per_case: Vec<CaseSensitivity>,
}

impl SensitivityReport {
    pub fn delta(&self, metric: &str, group: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.group == group)
            .map(|r| r.delta_percent)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusCase {
    pub case_id: String,
    pub image: RgbImage,
    pub triple: PerturbedTriple,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores every caption of every triple as a supplied report (stability is
/// structurally excluded for static text) and reports the relative drop of
/// each group against control.
pub fn run_sensitivity(corpus: &[CorpusCase], ev: &Evaluator) -> Result<SensitivityReport, ExperimentError> {
    if corpus.is_empty() {
        return Err(ExperimentError::EmptyInput("corpus"));
    }
    let mut ev = ev.clone();
    ev.config.stability = StabilityMode::Skip;
    let mut per_case = corpus
        .par_iter()
        .map(|c| {
            let score = |text: &str| -> Result<TextScores, ExperimentError> {
                let b = ev.evaluate(&CaseInput {
                    case_id: &c.case_id,
                    image: &c.image,
                    report: Some(text),
                })?;
                Ok(TextScores { s_g: b.s_g, s_l: b.s_l })
            };
            Ok(CaseSensitivity {
                case_id: c.case_id.clone(),
                control: score(&c.triple.control)?,
                visual_hallucination: score(&c.triple.visual_hallucination)?,
                logic_error: score(&c.triple.logic_error)?,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    per_case.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut rows = Vec::new();
    for (metric, get) in [
        ("s_g", (|s: &TextScores| s.s_g) as fn(&TextScores) -> f64),
        ("s_l", |s| s.s_l),
    ] {
        let control: Vec<f64> = per_case.iter().map(|c| get(&c.control)).collect();
        for group in [Variant::VisualHallucination, Variant::LogicError] {
            let perturbed: Vec<f64> = per_case
                .iter()
                .map(|c| match group {
                    Variant::VisualHallucination => get(&c.visual_hallucination),
                    Variant::LogicError => get(&c.logic_error),
                })
                .collect();
            rows.push(SensitivityRow {
                metric: metric.to_owned(),
                group,
                control_mean: mean(control.iter().copied()),
                perturbed_mean: mean(perturbed.iter().copied()),
                delta_percent: sensitivity_delta(&control, &perturbed)?,
            });
        }
    }
    Ok(SensitivityReport {
        cases: per_case.len(),
        rows,
        per_case,
    })
}
