//! Evaluation mechanics: perturbed-corpus generation, sensitivity deltas,
//! rank correlation, run variance, axis ablation and domain-gap comparison.

pub mod ablation;
pub mod generators;
pub mod sensitivity;
pub mod stats;
pub mod synthetic;

use thiserror::Error;

use crate::fusion::{CaseError, FusionError};
use crate::providers::ProviderError;
use crate::tessellate::TessellateError;

pub use ablation::{ablate, AblationRow, AblationTable, AxisScores};
pub use generators::{
    make_logic_error, make_triple, make_visual_hallucination, Edit, EditOperation, PerturbedTriple, Variant,
};
pub use sensitivity::{run_sensitivity, CorpusCase, SensitivityReport, SensitivityRow};
pub use stats::{domain_gap, midranks, run_variance, sensitivity_delta, spearman_rho, DomainGap, RunVariance};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("caption has no lexicon entity to replace")]
    NoEntityToReplace,
    #[error("no pool term shares a category with the caption's entities")]
    NoReplacement,
    #[error("caption has no antonym-table term")]
    NoPolarTerm,
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("control mean is zero; relative drop undefined")]
    ZeroControlMean,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("no severity rank for case {0}")]
    MissingSeverity(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Tessellate(#[from] TessellateError),
}
