//! Axis ablation: how much does the fused score's rank agreement with an
//! error-severity ranking fall when one axis is removed?

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::spearman_rho;
use super::ExperimentError;
use crate::fusion::{fuse_available, Axis, ScoreBundle, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisScores {
    pub case_id: String,
    pub s_g: f64,
    pub s_l: f64,
    pub s_s: Option<f64>,
}

impl From<&ScoreBundle> for AxisScores {
    fn from(b: &ScoreBundle) -> Self {
        Self {
            case_id: b.case_id.clone(),
            s_g: b.s_g,
            s_l: b.s_l,
            s_s: b.s_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub removed: Axis,
    pub rho: f64,
    /// `100 · (ρ_full − ρ_ablated) / ρ_full`; absent when `ρ_full = 0`.
    pub drop_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cases: usize,
    pub rho_full: f64,
    pub rows: Vec<AblationRow>,
}

fn fused(cases: &[AxisScores], weights: &Weights<f64>, removed: Option<Axis>) -> Result<Vec<f64>, ExperimentError> {
    cases
        .iter()
        .map(|c| {
            let mut s = [Some(c.s_g), Some(c.s_l), c.s_s];
            if let Some(a) = removed {
                s[a as usize] = None;
            }
            Ok(fuse_available(s, weights)?)
        })
        .collect()
}

/// Spearman ρ between the fused score and `severity` (case id → rank, where
/// rank 1 is the most severe error, so a faithful metric correlates
/// positively), for the full fusion and with each axis removed in turn.
pub fn ablate(
    cases: &[AxisScores],
    severity: &BTreeMap<String, f64>,
    weights: &Weights<f64>,
) -> Result<AblationTable, ExperimentError> {
    let mut sorted: Vec<AxisScores> = cases.to_vec();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let ranks = sorted
        .iter()
        .map(|c| {
            severity
                .get(&c.case_id)
                .copied()
                .ok_or_else(|| ExperimentError::MissingSeverity(c.case_id.clone()))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let rho_full = spearman_rho(&fused(&sorted, weights, None)?, &ranks)?;
    let rows = Axis::ALL
        .into_iter()
        .map(|axis| {
            let rho = spearman_rho(&fused(&sorted, weights, Some(axis))?, &ranks)?;
            let drop_percent = (rho_full != 0.0).then(|| 100.0 * (rho_full - rho) / rho_full);
            Ok(AblationRow {
                removed: axis,
                rho,
                drop_percent,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(AblationTable {
        cases: sorted.len(),
        rho_full,
        rows,
    })
}
