//! Post-hoc temperature scaling of two-class logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::softmax2;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
const TOLERANCE: f64 = 1e-6;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Error, PartialEq)]
pub enum TemperatureError {
    #[error("calibration set must contain both classes")]
    SingleClassCalibrationSet,
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("{logits} logits but {labels} labels")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("label at index {0} is not 0 or 1")]
    InvalidLabel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
    pub final_nll: f64,
    pub iterations: usize,
}

impl TemperatureModel {
    pub fn identity() -> Self {
        TemperatureModel {
            temperature: 1.0,
            final_nll: f64::NAN,
            iterations: 0,
        }
    }

    pub fn apply(&self, logits: [f64; 2]) -> [f64; 2] {
        apply_temperature(logits, self.temperature)
    }
}

/// Softmax of `logits / temperature` with max-subtraction.
pub fn apply_temperature(logits: [f64; 2], temperature: f64) -> [f64; 2] {
    softmax2(logits, temperature)
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn mean_nll(logits: &[[f64; 2]], labels: &[u8], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            // -ln p_y = softplus(l_other/t - l_y/t)
            let own = l[y as usize] / t;
            let other = l[1 - y as usize] / t;
            let z = other - own;
            if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .sum();
    total / logits.len() as f64
}

/// Fits the scalar temperature minimising mean NLL on `[T_MIN, T_MAX]`
/// by golden-section search.
pub fn fit_temperature(
    logits: &[[f64; 2]],
    labels: &[u8],
) -> Result<TemperatureModel, TemperatureError> {
    if logits.len() != labels.len() {
        return Err(TemperatureError::LengthMismatch {
            logits: logits.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = logits.iter().position(|l| !(l[0].is_finite() && l[1].is_finite())) {
        return Err(TemperatureError::NonFiniteLogit(i));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(TemperatureError::InvalidLabel(i));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(TemperatureError::SingleClassCalibrationSet);
    }

    let f = |t: f64| mean_nll(logits, labels, t);
    let (mut a, mut b) = (T_MIN, T_MAX);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iterations = 0;
    while b - a > TOLERANCE {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }

    // The interior estimate cannot land exactly on a box bound, and the
    // identity temperature must never be beaten by the search result.
    let mid = 0.5 * (a + b);
    let (temperature, final_nll) = [mid, T_MIN, T_MAX, 1.0]
        .into_iter()
        .map(|t| (t, f(t)))
        .fold((f64::NAN, f64::INFINITY), |best, cand| {
            if cand.1 < best.1 {
                cand
            } else {
                best
            }
        });
    Ok(TemperatureModel {
        temperature,
        final_nll,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logits from a well-specified logistic model: labels ~ Bernoulli(sigmoid(z)).
    fn calibrated_sample(n: usize, seed: u64, scale: f64) -> (Vec<[f64; 2]>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.random_range(-4.0..4.0);
            let p1 = 1.0 / (1.0 + (-z).exp());
            labels.push(u8::from(rng.random::<f64>() < p1));
            logits.push([0.0, scale * z]);
        }
        (logits, labels)
    }

    #[test]
    fn well_specified_logits_fit_near_one() {
        let (l, y) = calibrated_sample(20_000, 1, 1.0);
        let m = fit_temperature(&l, &y).unwrap();
        assert!((m.temperature - 1.0).abs() < 0.05, "{}", m.temperature);
        assert!(m.final_nll <= mean_nll(&l, &y, 1.0) + 1e-12);
    }

    #[test]
    fn tripled_logits_fit_near_three() {
        let (l, y) = calibrated_sample(20_000, 2, 3.0);
        let m = fit_temperature(&l, &y).unwrap();
        assert!((m.temperature - 3.0).abs() < 0.1, "{}", m.temperature);
    }

    #[test]
    fn separable_case_hits_lower_bound() {
        let a = 2.0;
        let m = fit_temperature(&[[a, -a], [-a, a]], &[0, 1]).unwrap();
        assert_eq!(m.temperature, T_MIN);
    }

    #[test]
    fn search_matches_brute_force_grid() {
        let (l, y) = calibrated_sample(2_000, 3, 1.7);
        let m = fit_temperature(&l, &y).unwrap();
        // dense grid followed by local refinement, independent of golden section
        let mut best = (0.0, f64::INFINITY);
        let mut t = T_MIN;
        while t <= T_MAX {
            let v = mean_nll(&l, &y, t);
            if v < best.1 {
                best = (t, v);
            }
            t += 1e-3;
        }
        let mut t = best.0 - 1e-3;
        while t <= best.0 + 1e-3 {
            let v = mean_nll(&l, &y, t);
            if v < best.1 {
                best = (t, v);
            }
            t += 1e-7;
        }
        assert!((m.temperature - best.0).abs() < 1e-5, "{} vs {}", m.temperature, best.0);
        assert!(m.final_nll <= best.1 + 1e-12);
    }

    #[test]
    fn deterministic_and_rejects_bad_input() {
        let (l, y) = calibrated_sample(500, 4, 2.0);
        assert_eq!(fit_temperature(&l, &y), fit_temperature(&l, &y));
        assert_eq!(
            fit_temperature(&[[0.0, 1.0]], &[1]),
            Err(TemperatureError::SingleClassCalibrationSet)
        );
        assert_eq!(
            fit_temperature(&[[0.0, f64::NAN], [0.0, 0.0]], &[0, 1]),
            Err(TemperatureError::NonFiniteLogit(0))
        );
    }

    #[test]
    fn apply_examples() {
        assert_eq!(apply_temperature([0.0, 0.0], 7.0), [0.5, 0.5]);
        let p = apply_temperature([3f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-15);
        let p = apply_temperature([1000.0, 0.0], 1.0);
        // exp(-1000) underflows to zero in f64; the exact value is ~5e-435
        assert_eq!(p, [1.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn temperature_never_flips_prediction(a in -50.0f64..50.0, b in -50.0f64..50.0, t in 0.05f64..20.0) {
            let p = apply_temperature([a, b], t);
            proptest::prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            if a != b {
                proptest::prop_assert_eq!(p[0] > p[1], a > b);
            }
        }
    }
}
