//! Mondrian (class-conditional) split conformal prediction for two classes.
//!
//! Nonconformity is `s = 1 - p_y(x)` on calibrated probabilities. Scores
//! are stratified by true label and kept verbatim, so thresholds for any
//! `alpha` can be queried after fitting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConformalError {
    #[error("calibration set has no samples of class {0}")]
    MissingClassInCalibration(u8),
    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("{probs} probability vectors but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("label at index {0} is not 0 or 1")]
    InvalidLabel(usize),
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::AlphaOutOfRange(alpha))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    /// Ascending nonconformity scores per true class.
    scores: [Vec<f64>; 2],
}

impl ConformalCalibrator {
    /// Builds a calibrator from raw per-class score lists.
    pub fn from_scores(mut scores: [Vec<f64>; 2]) -> Result<Self, ConformalError> {
        for (c, s) in scores.iter_mut().enumerate() {
            if s.is_empty() {
                return Err(ConformalError::MissingClassInCalibration(c as u8));
            }
            s.sort_by(f64::total_cmp);
        }
        Ok(ConformalCalibrator { scores })
    }

    pub fn scores(&self, class: u8) -> &[f64] {
        &self.scores[class as usize]
    }

    pub fn count(&self, class: u8) -> usize {
        self.scores[class as usize].len()
    }

    /// The `ceil((n_c + 1)(1 - alpha))`-th smallest class score, or `+inf`
    /// when that rank exceeds `n_c`.
    pub fn class_quantile(&self, class: u8, alpha: f64) -> Result<f64, ConformalError> {
        check_alpha(alpha)?;
        let s = &self.scores[class as usize];
        let rank = conformal_rank(s.len(), alpha);
        Ok(if rank > s.len() {
            f64::INFINITY
        } else {
            s[rank - 1]
        })
    }

    pub fn thresholds(&self, alpha: f64) -> Result<ClassThresholds, ConformalError> {
        Ok(ClassThresholds([
            self.class_quantile(0, alpha)?,
            self.class_quantile(1, alpha)?,
        ]))
    }

    pub fn prediction_set(&self, probs: [f64; 2], alpha: f64) -> Result<PredictionSet, ConformalError> {
        Ok(self.thresholds(alpha)?.prediction_set(probs))
    }
}

/// Finite-sample rank `ceil((n + 1)(1 - alpha))`, at least 1.
///
/// The product is nudged down by a few ulps before `ceil`, so that e.g.
/// `10 * (1 - 0.1)` lands on 9 rather than 10.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let rank = (x - x.abs() * 1e-12).ceil();
    (rank.max(1.0)) as usize
}

/// Per-class score thresholds `q_0, q_1` at a fixed alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassThresholds(pub [f64; 2]);

impl ClassThresholds {
    /// `c` is included iff `1 - p_c <= q_c`.
    pub fn prediction_set(&self, probs: [f64; 2]) -> PredictionSet {
        PredictionSet {
            members: [1.0 - probs[0] <= self.0[0], 1.0 - probs[1] <= self.0[1]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PredictionSet {
    pub members: [bool; 2],
}

impl PredictionSet {
    pub fn cardinality(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.members[class as usize]
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        (0..2).all(|c| !self.members[c] || other.members[c])
    }

    /// The single member, when the set is a singleton.
    pub fn singleton(&self) -> Option<u8> {
        match self.members {
            [true, false] => Some(0),
            [false, true] => Some(1),
            _ => None,
        }
    }
}

/// Stores `s_i = 1 - p_{y_i}(x_i)` stratified by `y_i`.
pub fn fit_conformal(probs: &[[f64; 2]], labels: &[u8]) -> Result<ConformalCalibrator, ConformalError> {
    if probs.len() != labels.len() {
        return Err(ConformalError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let mut scores: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y > 1 {
            return Err(ConformalError::InvalidLabel(i));
        }
        scores[y as usize].push((1.0 - p[y as usize]).clamp(0.0, 1.0));
    }
    ConformalCalibrator::from_scores(scores)
}
