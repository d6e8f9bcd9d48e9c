//! Reference-free evaluation of generated pathology reports.
//!
//! A report is scored on three axes and fused into a trust score:
//!
//! * **Grounding** ([`grounding`]): each clinical entity is matched to its
//!   best image patch; the mean best cosine, remapped to `[0, 1]`.
//! * **Logic** ([`logic`]): morphology/diagnosis sentence pairs from a rule
//!   knowledge graph are scored for contradiction; one minus the mean of the
//!   top-K probabilities.
//! * **Stability** ([`stability`]): the subject model regenerates under a
//!   stain perturbation ([`stain`]) and a misleading clinical history; one
//!   minus the mean semantic drift.
//!
//! [`fusion`] combines the axes and routes each case to Deploy, Review or
//! Reject. All learned components sit behind [`providers`], which ship seeded
//! baselines, an HTTP client and record/replay transcripts.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the orchestration layer.

pub mod config;
pub mod experiments;
pub mod fusion;
pub mod grounding;
pub mod hashing;
pub mod lexicon;
pub mod logic;
pub mod manifest;
pub mod providers;
pub mod rng;
pub mod scalar;
pub mod stability;
pub mod stain;
pub mod tessellate;
pub mod text;

pub use fusion::{
    evaluate_case, CaseError, CaseInput, EvalConfig, Evaluator, Flag, Routing, ScoreBundle, StabilityMode,
};
pub use lexicon::Resources;
pub use providers::Providers;
pub use scalar::Scalar;

/// Scalar type used by the pipeline.
pub type Real = f64;
pub type Weights = fusion::Weights<Real>;
pub type RoutingThresholds = fusion::RoutingThresholds<Real>;
pub type StainModel = stain::StainModel<Real>;
pub type OdImage = stain::OdImage<Real>;
pub type SimilarityMatrix = grounding::SimilarityMatrix<Real>;
pub type GroundingResult = grounding::GroundingResult<Real>;
pub type LogicScore = logic::LogicScore<Real>;
pub type RunVariance = experiments::RunVariance<Real>;
pub type DomainGap = experiments::DomainGap<Real>;

/// Single-precision variants of the numeric kernels' result types.
pub mod f32 {
    pub type Weights = crate::fusion::Weights<f32>;
    pub type RoutingThresholds = crate::fusion::RoutingThresholds<f32>;
    pub type StainModel = crate::stain::StainModel<f32>;
    pub type OdImage = crate::stain::OdImage<f32>;
    pub type SimilarityMatrix = crate::grounding::SimilarityMatrix<f32>;
    pub type GroundingResult = crate::grounding::GroundingResult<f32>;
    pub type LogicScore = crate::logic::LogicScore<f32>;
}
