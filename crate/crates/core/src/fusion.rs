//! Per-case orchestration, weighted fusion and guardrail routing.

use std::collections::BTreeSet;
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{ground_report, GroundingError, GroundingReport};
use crate::hashing::{image_hash, sha256_hex};
use crate::lexicon::Resources;
use crate::logic::{evaluate_logic, LogicError, LogicReport, DEFAULT_TOP_K};
use crate::providers::{ProviderError, Providers};
use crate::scalar::Scalar;
use crate::stability::{evaluate_stability, StabilityError, StabilityOptions, StabilityResult};
use crate::tessellate::{
    filter_background, tessellate, BackgroundFilter, TessellateError, DEFAULT_PATCH_SIZE, DEFAULT_STRIDE,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_BASE_PROMPT: &str =
    "Describe the histopathological findings in this image and state the most likely diagnosis.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid routing thresholds: need 0 <= reject_max ({reject_max}) < deploy_min ({deploy_min}) <= 1")]
    InvalidThresholds { deploy_min: f64, reject_max: f64 },
    #[error("{axis} score {value} is outside [0, 1]")]
    ScoreOutOfRange { axis: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Grounding,
    Logic,
    Stability,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Grounding, Axis::Logic, Axis::Stability];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Grounding => "grounding",
            Axis::Logic => "logic",
            Axis::Stability => "stability",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fusion weights; non-negative and summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights<T> {
    pub w_g: T,
    pub w_l: T,
    pub w_s: T,
}

impl<T: Scalar> Weights<T> {
    pub fn new(w_g: T, w_l: T, w_s: T) -> Result<Self, FusionError> {
        let w = Self { w_g, w_l, w_s };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let ws = self.as_array();
        if ws.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(FusionError::InvalidWeights(format!("{ws:?} must be finite and >= 0")));
        }
        let sum: f64 = ws.iter().map(|w| w.as_f64()).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(FusionError::InvalidWeights(format!("sum is {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.w_g, self.w_l, self.w_s]
    }

    pub fn get(&self, axis: Axis) -> T {
        self.as_array()[axis.index()]
    }

    /// Zeroes the axes not in `keep` and rescales the rest to sum to one.
    pub fn restricted(&self, keep: [bool; 3]) -> Result<Self, FusionError> {
        let ws = self.as_array();
        let mut total = T::zero();
        for i in 0..3 {
            if keep[i] {
                total += ws[i];
            }
        }
        if total <= T::zero() {
            return Err(FusionError::InvalidWeights(
                "no weight left on the remaining axes".into(),
            ));
        }
        let r = |i: usize| if keep[i] { ws[i] / total } else { T::zero() };
        Ok(Self {
            w_g: r(0),
            w_l: r(1),
            w_s: r(2),
        })
    }

    /// Renormalized over grounding and logic; used when stability is skipped.
    pub fn without_stability(&self) -> Result<Self, FusionError> {
        self.restricted([true, true, false])
    }
}

impl Default for Weights<f64> {
    fn default() -> Self {
        Self {
            w_g: 0.4,
            w_l: 0.3,
            w_s: 0.3,
        }
    }
}

impl Default for Weights<f32> {
    fn default() -> Self {
        Self {
            w_g: 0.4,
            w_l: 0.3,
            w_s: 0.3,
        }
    }
}

fn check_score<T: Scalar>(axis: &'static str, v: T) -> Result<(), FusionError> {
    if v >= T::zero() && v <= T::one() {
        Ok(())
    } else {
        Err(FusionError::ScoreOutOfRange {
            axis,
            value: v.as_f64(),
        })
    }
}

/// `s_g·w_g + s_l·w_l + s_s·w_s`.
pub fn fuse<T: Scalar>(s_g: T, s_l: T, s_s: T, w: &Weights<T>) -> Result<T, FusionError> {
    w.validate()?;
    check_score("grounding", s_g)?;
    check_score("logic", s_l)?;
    check_score("stability", s_s)?;
    Ok((s_g * w.w_g + s_l * w.w_l + s_s * w.w_s).clamp_to(T::zero(), T::one()))
}

/// Fuses whichever axes are present, renormalizing the weights over them.
pub fn fuse_available<T: Scalar>(scores: [Option<T>; 3], w: &Weights<T>) -> Result<T, FusionError> {
    let keep = scores.map(|s| s.is_some());
    let r = w.restricted(keep)?;
    let v = scores.map(|s| s.unwrap_or(T::zero()));
    fuse(v[0], v[1], v[2], &r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingThresholds<T> {
    pub deploy_min: T,
    pub reject_max: T,
}

impl<T: Scalar> RoutingThresholds<T> {
    pub fn new(deploy_min: T, reject_max: T) -> Result<Self, FusionError> {
        let t = Self { deploy_min, reject_max };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let ok = self.reject_max >= T::zero() && self.reject_max < self.deploy_min && self.deploy_min <= T::one();
        if ok {
            Ok(())
        } else {
            Err(FusionError::InvalidThresholds {
                deploy_min: self.deploy_min.as_f64(),
                reject_max: self.reject_max.as_f64(),
            })
        }
    }
}

impl Default for RoutingThresholds<f64> {
    fn default() -> Self {
        Self {
            deploy_min: 0.7,
            reject_max: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Routing {
    Deploy,
    Review,
    Reject,
}

impl Routing {
    pub fn as_str(self) -> &'static str {
        match self {
            Routing::Deploy => "Deploy",
            Routing::Review => "Review",
            Routing::Reject => "Reject",
        }
    }
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Boundaries go to the safer bucket: `deploy_min` itself deploys,
/// `reject_max` itself rejects.
pub fn route<T: Scalar>(s_total: T, t: &RoutingThresholds<T>) -> Routing {
    if s_total >= t.deploy_min {
        Routing::Deploy
    } else if s_total <= t.reject_max {
        Routing::Reject
    } else {
        Routing::Review
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    #[default]
    On,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// No lexicon entity in the report; S_g is the uninformative midpoint.
    Ungroundable,
    /// No premise–hypothesis pair; S_ℓ is vacuously 1.
    Vacuous,
    /// Stability was not evaluated and the weights were renormalized.
    StabilitySkipped,
    /// The report was produced by the subject rather than supplied.
    ReportGenerated,
}

/// Scoring settings shared by every case of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub patch_size: u32,
    pub stride: u32,
    /// `None` disables background filtering.
    pub background: Option<BackgroundFilter>,
    pub weights: Weights<f64>,
    pub thresholds: RoutingThresholds<f64>,
    pub top_k: usize,
    pub stability: StabilityMode,
    pub stability_options: StabilityOptions,
    pub base_prompt: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_STRIDE,
            background: Some(BackgroundFilter::default()),
            weights: Weights::default(),
            thresholds: RoutingThresholds::default(),
            top_k: DEFAULT_TOP_K,
            stability: StabilityMode::On,
            stability_options: StabilityOptions::default(),
            base_prompt: DEFAULT_BASE_PROMPT.to_owned(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        self.weights.validate()?;
        self.thresholds.validate()?;
        if self.stability == StabilityMode::Skip {
            self.weights.without_stability()?;
        }
        if self.patch_size == 0 || self.stride == 0 {
            return Err(FusionError::InvalidConfig("patch_size and stride must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(FusionError::InvalidConfig("top_k must be >= 1".into()));
        }
        if self.base_prompt.trim().is_empty() {
            return Err(FusionError::InvalidConfig("base_prompt is empty".into()));
        }
        if let Some(b) = &self.background {
            for v in [b.saturation_threshold, b.min_tissue_fraction] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(FusionError::InvalidConfig(format!(
                        "background threshold {v} outside [0, 1]"
                    )));
                }
            }
        }
        if self.stability_options.ensemble == 0 {
            return Err(FusionError::InvalidConfig("stability ensemble must be >= 1".into()));
        }
        self.stability_options
            .perturbation
            .validate()
            .and_then(|_| self.stability_options.macenko.validate())
            .map_err(|e| FusionError::InvalidConfig(e.to_string()))
    }

    /// sha256 of the canonical JSON of this config followed by the resource digest.
    pub fn hash(&self, resources: &Resources) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(format!("{json}\n{}", resources.digest()).as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIds {
    pub image: String,
    pub text: String,
    pub nli: String,
    pub subject: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub transcript_hash: Option<String>,
    pub tool_version: String,
    pub providers: ProviderIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub grounding: GroundingReport,
    pub logic: LogicReport,
    pub stability: Option<StabilityResult>,
}

/// The complete, self-describing result for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub case_id: String,
    pub s_g: f64,
    pub s_l: f64,
    /// `None` when stability was skipped.
    pub s_s: Option<f64>,
    pub s_total: f64,
    pub routing: Routing,
    pub flags: BTreeSet<Flag>,
    /// Weights actually applied (renormalized when an axis was skipped).
    pub weights: Weights<f64>,
    pub thresholds: RoutingThresholds<f64>,
    pub report: String,
    pub image_hash: String,
    pub patch_size: u32,
    pub stride: u32,
    pub evidence: Evidence,
    pub provenance: Provenance,
}

impl ScoreBundle {
    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generation,
    Tessellation,
    Grounding,
    Logic,
    Stability,
    Fusion,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Tessellate(#[from] TessellateError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("no report supplied and no subject configured to generate one")]
    NoReport,
}

/// A case that could not be scored. No partial bundle is ever produced.
#[derive(Debug, Error)]
#[error("case {case_id}: {stage} failed: {source}")]
pub struct CaseError {
    pub case_id: String,
    pub stage: Stage,
    #[source]
    pub source: PipelineError,
}

#[derive(Debug, Clone, Copy)]
pub struct CaseInput<'a> {
    pub case_id: &'a str,
    pub image: &'a RgbImage,
    /// Pre-supplied report; `None` asks the subject for one.
    pub report: Option<&'a str>,
}

/// Everything needed to score cases: providers, resources and settings.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub providers: Providers,
    pub resources: Resources,
    pub config: EvalConfig,
    config_hash: String,
    transcript_hash: Option<String>,
}

impl Evaluator {
    pub fn new(providers: Providers, resources: Resources, config: EvalConfig) -> Result<Self, FusionError> {
        config.validate()?;
        if config.stability == StabilityMode::On && providers.subject.is_none() {
            return Err(FusionError::InvalidConfig(
                "stability requires a subject provider; set stability to skip".into(),
            ));
        }
        let config_hash = config.hash(&resources);
        Ok(Self {
            providers,
            resources,
            config,
            config_hash,
            transcript_hash: None,
        })
    }

    /// Replaces the default hash (config + resources) with a caller-computed one.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn with_transcript_hash(mut self, hash: Option<String>) -> Self {
        self.transcript_hash = hash;
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn evaluate(&self, case: &CaseInput<'_>) -> Result<ScoreBundle, CaseError> {
        evaluate_case(case, self)
    }

    fn provider_ids(&self) -> ProviderIds {
        ProviderIds {
            image: self.providers.image.id(),
            text: self.providers.text.id(),
            nli: self.providers.nli.id(),
            subject: self.providers.subject.as_ref().map(|s| s.id()),
        }
    }
}

/// Tessellate → (grounding ∥ logic ∥ stability) → fuse → route.
pub fn evaluate_case(case: &CaseInput<'_>, ev: &Evaluator) -> Result<ScoreBundle, CaseError> {
    let fail = |stage: Stage| {
        let case_id = case.case_id.to_owned();
        move |e: PipelineError| CaseError {
            case_id,
            stage,
            source: e,
        }
    };
    let cfg = &ev.config;
    let mut flags = BTreeSet::new();

    let report = match case.report {
        Some(r) => r.to_owned(),
        None => {
            let subject = ev
                .providers
                .subject
                .as_ref()
                .ok_or(PipelineError::NoReport)
                .map_err(fail(Stage::Generation))?;
            flags.insert(Flag::ReportGenerated);
            subject
                .generate(case.image, &cfg.base_prompt)
                .map_err(|e| fail(Stage::Generation)(e.into()))?
        }
    };
    let generated = flags.contains(&Flag::ReportGenerated);

    let mut bag =
        tessellate(case.image, cfg.patch_size, cfg.stride).map_err(|e| fail(Stage::Tessellation)(e.into()))?;
    if let Some(b) = &cfg.background {
        bag = filter_background(&bag, b.saturation_threshold, b.min_tissue_fraction);
    }

    let p = &ev.providers;
    let res = &ev.resources;
    let (grounding, (logic, stability)) = rayon::join(
        || ground_report(&report, &bag, &res.lexicon, p.image.as_ref(), p.text.as_ref()),
        || {
            rayon::join(
                || evaluate_logic(&report, &res.lexicon, &res.cues, p.nli.as_ref(), cfg.top_k),
                || match (cfg.stability, &p.subject) {
                    (StabilityMode::Skip, _) => Ok(None),
                    (StabilityMode::On, None) => Err(StabilityError::Provider(ProviderError::EmptyGeneration(
                        "no subject configured".into(),
                    ))),
                    (StabilityMode::On, Some(subject)) => evaluate_stability(
                        case.image,
                        &cfg.base_prompt,
                        res.attack_templates.select(case.case_id),
                        generated.then_some(report.as_str()),
                        subject.as_ref(),
                        p.text.as_ref(),
                        &cfg.stability_options,
                    )
                    .map(Some),
                },
            )
        },
    );
    let grounding = grounding.map_err(|e| fail(Stage::Grounding)(e.into()))?;
    let logic = logic.map_err(|e| fail(Stage::Logic)(e.into()))?;
    let stability = stability.map_err(|e| fail(Stage::Stability)(e.into()))?;

    if grounding.ungroundable {
        flags.insert(Flag::Ungroundable);
    }
    if logic.vacuous {
        flags.insert(Flag::Vacuous);
    }
    let s_s = stability.as_ref().map(|s| s.score);
    let weights = match s_s {
        Some(_) => Ok(cfg.weights),
        None => {
            flags.insert(Flag::StabilitySkipped);
            cfg.weights.without_stability()
        }
    }
    .map_err(|e| fail(Stage::Fusion)(e.into()))?;
    let s_total =
        fuse(grounding.score, logic.score, s_s.unwrap_or(0.0), &weights).map_err(|e| fail(Stage::Fusion)(e.into()))?;
    let routing = route(s_total, &cfg.thresholds);

    Ok(ScoreBundle {
        case_id: case.case_id.to_owned(),
        s_g: grounding.score,
        s_l: logic.score,
        s_s,
        s_total,
        routing,
        flags,
        weights,
        thresholds: cfg.thresholds,
        report,
        image_hash: image_hash(case.image),
        patch_size: cfg.patch_size,
        stride: cfg.stride,
        evidence: Evidence {
            grounding,
            logic,
            stability,
        },
        provenance: Provenance {
            config_hash: ev.config_hash.clone(),
            transcript_hash: ev.transcript_hash.clone(),
            tool_version: TOOL_VERSION.to_owned(),
            providers: ev.provider_ids(),
        },
    })
}
