//! Trinary triage: combine the conformal (aleatoric) and geometric
//! (epistemic) gates, plus the single-gate and entropy baselines used for
//! ablation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{ClassThresholds, ConformalCalibrator, ConformalError};
use crate::dataset::{Cohort, DatasetError, SplitKind};
use crate::geometry::{l2_normalize, GeometricModel, GeometryError};
use crate::stats::{argmax2, entropy, percentile_sorted};
use crate::temperature::TemperatureModel;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("calibrator `{0}` has not been fitted")]
    UnfittedCalibrator(&'static str),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Hybrid,
    AleatoricOnly,
    EpistemicOnly,
    StandardUncertainty,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::AleatoricOnly,
        PolicyKind::EpistemicOnly,
        PolicyKind::StandardUncertainty,
        PolicyKind::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Hybrid => "hybrid",
            PolicyKind::AleatoricOnly => "aleatoric_only",
            PolicyKind::EpistemicOnly => "epistemic_only",
            PolicyKind::StandardUncertainty => "standard_uncertainty",
        }
    }

    /// Row label used in ablation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PolicyKind::Hybrid => "Dual Veto (Hybrid)",
            PolicyKind::AleatoricOnly => "Aleatoric Only (MCP)",
            PolicyKind::EpistemicOnly => "Epistemic Only (MCMD)",
            PolicyKind::StandardUncertainty => "Standard Uncertainty",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "hybrid" => Ok(PolicyKind::Hybrid),
            "aleatoric_only" | "aleatoric" => Ok(PolicyKind::AleatoricOnly),
            "epistemic_only" | "epistemic" => Ok(PolicyKind::EpistemicOnly),
            "standard_uncertainty" | "standard" => Ok(PolicyKind::StandardUncertainty),
            _ => Err(format!("unknown policy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub alpha: f64,
    /// Distance percentile for the geometric gate.
    pub percentile: f64,
    pub inertia_threshold: f64,
    pub kind: PolicyKind,
    pub standard_uncertainty_percentile: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            alpha: 0.05,
            percentile: 99.0,
            inertia_threshold: 0.05,
            kind: PolicyKind::Hybrid,
            standard_uncertainty_percentile: 90.0,
        }
    }
}

impl PolicyConfig {
    pub fn with_kind(self, kind: PolicyKind) -> Self {
        PolicyConfig { kind, ..self }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PolicyError::ConfigMismatch(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        for (name, p) in [
            ("percentile", self.percentile),
            ("standard_uncertainty_percentile", self.standard_uncertainty_percentile),
        ] {
            if !(p > 0.0 && p <= 100.0) {
                return Err(PolicyError::ConfigMismatch(format!(
                    "{name} must lie in (0, 100], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything fitted on the calibration split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub member_ids: Vec<u32>,
    pub temperatures: Vec<TemperatureModel>,
    pub conformal: Option<ConformalCalibrator>,
    pub geometry: Option<GeometricModel>,
    /// Ascending predictive entropies of calibration samples.
    pub validation_entropies: Vec<f64>,
}

impl Calibration {
    pub fn temperature_values(&self) -> Vec<f64> {
        self.temperatures.iter().map(|t| t.temperature).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    ClearNegative,
    ClearPositive,
    Defer,
}

impl Outcome {
    pub fn is_clear(self) -> bool {
        self != Outcome::Defer
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::ClearNegative => "clear_negative",
            Outcome::ClearPositive => "clear_positive",
            Outcome::Defer => "defer",
        }
    }

    fn clear(label: u8) -> Self {
        if label == 1 {
            Outcome::ClearPositive
        } else {
            Outcome::ClearNegative
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clear_negative" => Ok(Outcome::ClearNegative),
            "clear_positive" => Ok(Outcome::ClearPositive),
            "defer" => Ok(Outcome::Defer),
            _ => Err(format!("unknown outcome `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeferReason {
    AmbiguousSet,
    GeometricOod,
    Both,
    /// Standard-uncertainty baseline: entropy above its calibration percentile.
    HighEntropy,
}

impl DeferReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DeferReason::AmbiguousSet => "ambiguous_set",
            DeferReason::GeometricOod => "geometric_ood",
            DeferReason::Both => "both",
            DeferReason::HighEntropy => "high_entropy",
        }
    }
}

impl FromStr for DeferReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ambiguous_set" => Ok(DeferReason::AmbiguousSet),
            "geometric_ood" => Ok(DeferReason::GeometricOod),
            "both" => Ok(DeferReason::Both),
            "high_entropy" => Ok(DeferReason::HighEntropy),
            _ => Err(format!("unknown defer reason `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriageDecision {
    pub outcome: Outcome,
    pub reason: Option<DeferReason>,
    /// Argmax of the calibrated probabilities.
    pub predicted: u8,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub set_cardinality: Option<usize>,
    pub distance: Option<f64>,
    pub tau: Option<f64>,
    pub entropy: f64,
}

/// A calibration resolved at one configuration, ready to score inputs.
#[derive(Debug, Clone)]
pub struct Gates<'a> {
    kind: PolicyKind,
    set_thresholds: Option<ClassThresholds>,
    geometry: Option<std::borrow::Cow<'a, GeometricModel>>,
    entropy_threshold: Option<f64>,
}

impl<'a> Gates<'a> {
    pub fn new(cal: &'a Calibration, config: &PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let set_thresholds = cal
            .conformal
            .as_ref()
            .map(|c| c.thresholds(config.alpha))
            .transpose()?;
        let geometry = match &cal.geometry {
            Some(g) if g.percentile != config.percentile && !g.calibration_distances[0].is_empty() => {
                Some(std::borrow::Cow::Owned(g.with_percentile(config.percentile)?))
            }
            Some(g) => Some(std::borrow::Cow::Borrowed(g)),
            None => None,
        };
        let entropy_threshold = (!cal.validation_entropies.is_empty()).then(|| {
            percentile_sorted(&cal.validation_entropies, config.standard_uncertainty_percentile)
        });

        match config.kind {
            PolicyKind::Hybrid | PolicyKind::AleatoricOnly if set_thresholds.is_none() => {
                return Err(PolicyError::UnfittedCalibrator("conformal"))
            }
            PolicyKind::Hybrid | PolicyKind::EpistemicOnly if geometry.is_none() => {
                return Err(PolicyError::ConfigMismatch(format!(
                    "policy `{}` needs a geometric model",
                    config.kind
                )))
            }
            PolicyKind::StandardUncertainty if entropy_threshold.is_none() => {
                return Err(PolicyError::UnfittedCalibrator("validation entropies"))
            }
            _ => {}
        }
        Ok(Gates {
            kind: config.kind,
            set_thresholds,
            geometry,
            entropy_threshold,
        })
    }

    pub fn geometry(&self) -> Option<&GeometricModel> {
        self.geometry.as_deref()
    }

    /// Decision for one input; `embedding` must already be unit-normalized.
    pub fn decide(&self, probs: [f64; 2], embedding: &[f64]) -> Result<TriageDecision, PolicyError> {
        let predicted = argmax2(probs);
        let confidence = probs[predicted as usize];
        let h = entropy(&probs);
        let set_cardinality = self
            .set_thresholds
            .map(|q| q.prediction_set(probs).cardinality());
        let (distance, tau) = match self.geometry() {
            Some(g) => (
                Some(g.mahalanobis_min(embedding, predicted)?),
                Some(g.thresholds[predicted as usize]),
            ),
            None => (None, None),
        };
        let set_ok = set_cardinality == Some(1);
        let dist_ok = matches!((distance, tau), (Some(d), Some(t)) if d <= t);

        let reason = match self.kind {
            PolicyKind::Hybrid => match (set_ok, dist_ok) {
                (true, true) => None,
                (false, true) => Some(DeferReason::AmbiguousSet),
                (true, false) => Some(DeferReason::GeometricOod),
                (false, false) => Some(DeferReason::Both),
            },
            PolicyKind::AleatoricOnly => (!set_ok).then_some(DeferReason::AmbiguousSet),
            PolicyKind::EpistemicOnly => (!dist_ok).then_some(DeferReason::GeometricOod),
            PolicyKind::StandardUncertainty => {
                let limit = self.entropy_threshold.expect("checked in Gates::new");
                (h > limit).then_some(DeferReason::HighEntropy)
            }
        };
        Ok(TriageDecision {
            outcome: if reason.is_some() {
                Outcome::Defer
            } else {
                Outcome::clear(predicted)
            },
            reason,
            predicted,
            confidence,
            set_cardinality,
            distance,
            tau,
            entropy: h,
        })
    }
}

/// One-shot decision; prefer [`Gates`] when scoring many inputs.
pub fn decide(
    probs: [f64; 2],
    embedding: &[f64],
    cal: &Calibration,
    config: &PolicyConfig,
) -> Result<TriageDecision, PolicyError> {
    Gates::new(cal, config)?.decide(probs, embedding)
}

/// Decisions for every patient of `split`, in id order.
pub fn triage_split(
    cohort: &Cohort,
    cal: &Calibration,
    config: &PolicyConfig,
    split: SplitKind,
) -> Result<Vec<(String, TriageDecision)>, PolicyError> {
    if cal.member_ids != cohort.member_ids() {
        return Err(PolicyError::ConfigMismatch(format!(
            "calibration members {:?} differ from cohort members {:?}",
            cal.member_ids,
            cohort.member_ids()
        )));
    }
    let gates = Gates::new(cal, config)?;
    if let Some(g) = gates.geometry() {
        if g.dim != cohort.dim() {
            return Err(PolicyError::Geometry(GeometryError::DimensionMismatch {
                expected: g.dim,
                got: cohort.dim(),
            }));
        }
    }
    let temps = cal.temperature_values();
    cohort.check_temperatures(&temps)?;
    cohort
        .split(split)
        .map(|p| {
            let agg = p.aggregate(&temps);
            let emb = l2_normalize(p.reference_embedding())?;
            Ok((p.id.clone(), gates.decide(agg.probs, &emb)?))
        })
        .collect()
}

/// Decisions for the test split.
pub fn triage_cohort(
    cohort: &Cohort,
    cal: &Calibration,
    config: &PolicyConfig,
) -> Result<Vec<(String, TriageDecision)>, PolicyError> {
    triage_split(cohort, cal, config, SplitKind::Test)
}
