//! Epistemic veto: per-class multi-centroid structure in the L2-normalized
//! embedding space, a shared OAS-shrunk precision matrix, and per-class
//! Mahalanobis distance thresholds.

pub mod covariance;
pub mod kmeans;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use covariance::{fit_covariance, CovarianceFit};
pub use kmeans::{kmeans, kmeans_with_restarts, select_k, KMeansResult, KSelection};

use crate::stats::percentile_sorted;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("cannot normalize a zero-length vector")]
    ZeroVector,
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need at least 2 residuals for a covariance, got {0}")]
    DegenerateResiduals(usize),
    #[error("covariance could not be factorized even with jitter")]
    IllConditionedCovariance,
    #[error("class {0} has fewer than 2 correctly classified calibration samples")]
    NoCorrectSamplesForClass(u8),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no centroids fitted for class {0}")]
    UnfittedModel(u8),
    #[error("percentile must lie in (0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("{0} embeddings but {1} labels")]
    LengthMismatch(usize, usize),
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense row-major square matrix with an explicit dimension header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SquareMatrix { dim, data }
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(m[(i, j)]);
            }
        }
        SquareMatrix { dim, data }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `rᵀ M r`.
    pub fn quadratic_form(&self, r: &[f64]) -> f64 {
        (0..self.dim)
            .map(|i| r[i] * self.row(i).iter().zip(r).map(|(m, v)| m * v).sum::<f64>())
            .sum()
    }
}

/// Returns `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(GeometryError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub inertia_threshold: f64,
    /// `None` means `max(20, 1% of the class sample count)`.
    pub min_cluster_size: Option<usize>,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            inertia_threshold: 0.05,
            min_cluster_size: None,
            k_max: 10,
            seed: 0,
        }
    }
}

impl GeometryConfig {
    pub fn min_cluster_size_for(&self, class_count: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| 20usize.max(class_count / 100))
    }
}

/// Fitted geometric veto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricModel {
    pub dim: usize,
    /// Centroids per class, in unit-normalized space.
    pub centroids: [Vec<Vec<f64>>; 2],
    pub precision: SquareMatrix,
    pub shrinkage: f64,
    pub jitter: f64,
    /// Distance thresholds per class.
    pub thresholds: [f64; 2],
    pub percentile: f64,
    /// Ascending distances of correctly classified calibration samples.
    pub calibration_distances: [Vec<f64>; 2],
}

impl GeometricModel {
    /// Fits centroids per true class and the pooled OAS precision matrix.
    /// Thresholds start at `+inf` until [`GeometricModel::calibrate`] is run.
    pub fn fit(
        embeddings: &[Vec<f64>],
        labels: &[u8],
        config: &GeometryConfig,
    ) -> Result<Self, GeometryError> {
        if embeddings.len() != labels.len() {
            return Err(GeometryError::LengthMismatch(embeddings.len(), labels.len()));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
            return Err(GeometryError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let mut centroids: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut residuals = Vec::with_capacity(embeddings.len());
        for class in 0..2u8 {
            let points: Vec<Vec<f64>> = embeddings
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == class)
                .map(|(e, _)| e.clone())
                .collect();
            let min_size = config.min_cluster_size_for(points.len());
            let seed = crate::stats::mix_seed(config.seed, u64::from(class));
            let sel = select_k(
                &points,
                config.inertia_threshold,
                min_size,
                config.k_max,
                seed,
            )?;
            for (p, &a) in points.iter().zip(&sel.result.assignments) {
                residuals.push(p.iter().zip(&sel.result.centroids[a]).map(|(x, c)| x - c).collect());
            }
            centroids[class as usize] = sel.result.centroids;
        }
        let cov = fit_covariance(&residuals)?;
        Ok(GeometricModel {
            dim,
            centroids,
            precision: cov.precision,
            shrinkage: cov.shrinkage,
            jitter: cov.jitter,
            thresholds: [f64::INFINITY; 2],
            percentile: 100.0,
            calibration_distances: [Vec::new(), Vec::new()],
        })
    }

    pub fn k(&self, class: u8) -> usize {
        self.centroids[class as usize].len()
    }

    /// Minimum Mahalanobis distance from `x` to any centroid of `class`.
    pub fn mahalanobis_min(&self, x: &[f64], class: u8) -> Result<f64, GeometryError> {
        if x.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let cents = &self.centroids[class as usize];
        if cents.is_empty() {
            return Err(GeometryError::UnfittedModel(class));
        }
        let mut r = vec![0.0; self.dim];
        let mut best = f64::INFINITY;
        for c in cents {
            for ((ri, xi), ci) in r.iter_mut().zip(x).zip(c) {
                *ri = xi - ci;
            }
            best = best.min(self.precision.quadratic_form(&r).max(0.0));
        }
        Ok(best.sqrt())
    }

    /// Calibrates thresholds from correctly classified samples and stores
    /// their distances so other percentiles can be derived later.
    pub fn calibrate(
        &mut self,
        embeddings: &[Vec<f64>],
        predicted: &[u8],
        truth: &[u8],
        percentile: f64,
    ) -> Result<(), GeometryError> {
        let fit = fit_thresholds(self, embeddings, predicted, truth, percentile)?;
        self.thresholds = fit.thresholds;
        self.calibration_distances = fit.distances;
        self.percentile = percentile;
        Ok(())
    }

    /// Copy with thresholds re-derived at another percentile.
    pub fn with_percentile(&self, percentile: f64) -> Result<Self, GeometryError> {
        check_percentile(percentile)?;
        let mut out = self.clone();
        for c in 0..2 {
            let d = &self.calibration_distances[c];
            if d.len() < 2 {
                return Err(GeometryError::NoCorrectSamplesForClass(c as u8));
            }
            out.thresholds[c] = percentile_sorted(d, percentile);
        }
        out.percentile = percentile;
        Ok(out)
    }
}

fn check_percentile(p: f64) -> Result<(), GeometryError> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(GeometryError::InvalidPercentile(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdFit {
    pub thresholds: [f64; 2],
    pub distances: [Vec<f64>; 2],
}

/// Threshold per class = `percentile` of `d_M` over calibration samples with
/// `predicted == truth == c` (linear interpolation).
pub fn fit_thresholds(
    model: &GeometricModel,
    embeddings: &[Vec<f64>],
    predicted: &[u8],
    truth: &[u8],
    percentile: f64,
) -> Result<ThresholdFit, GeometryError> {
    check_percentile(percentile)?;
    if embeddings.len() != predicted.len() || embeddings.len() != truth.len() {
        return Err(GeometryError::LengthMismatch(embeddings.len(), truth.len()));
    }
    let mut distances: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for ((e, &p), &t) in embeddings.iter().zip(predicted).zip(truth) {
        if p == t {
            distances[t as usize].push(model.mahalanobis_min(e, t)?);
        }
    }
    let mut thresholds = [0.0; 2];
    for c in 0..2 {
        if distances[c].len() < 2 {
            return Err(GeometryError::NoCorrectSamplesForClass(c as u8));
        }
        distances[c].sort_by(f64::total_cmp);
        thresholds[c] = percentile_sorted(&distances[c], percentile);
    }
    Ok(ThresholdFit {
        thresholds,
        distances,
    })
}
