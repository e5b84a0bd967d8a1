//! Percentile bootstrap with per-resample seeded substreams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{MetricError, Result};
use crate::stats::percentile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapEstimate {
    pub point: f64,
    /// 2.5th / 97.5th percentiles; `None` when `n_boot = 0` or every
    /// resample was undefined.
    pub interval: Option<(f64, f64)>,
    pub n_valid: usize,
    /// Resamples on which the statistic was undefined.
    pub n_skipped: usize,
}

/// Indices of resample `b`: N draws with replacement from `0..n`. Each
/// resample reads its own ChaCha stream, so results do not depend on the
/// order in which resamples are evaluated.
pub fn resample_indices(n: usize, seed: u64, b: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Interval from resampled values, widened if needed so that it contains
/// the point estimate.
pub(crate) fn percentile_interval(mut values: Vec<f64>, point: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&values, 2.5).min(point);
    let hi = percentile_sorted(&values, 97.5).max(point);
    Some((lo, hi))
}

/// Bootstraps a statistic that reads records through an index slice.
pub fn bootstrap_indices<F>(n: usize, statistic: F, n_boot: usize, seed: u64) -> Result<BootstrapEstimate>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n_boot > 0 && n < 2 {
        return Err(MetricError::TooFewRecords(n));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all)?;
    let mut values = Vec::with_capacity(n_boot);
    let mut n_skipped = 0;
    for b in 0..n_boot as u64 {
        match statistic(&resample_indices(n, seed, b)) {
            Ok(v) => values.push(v),
            Err(_) => n_skipped += 1,
        }
    }
    let n_valid = values.len();
    Ok(BootstrapEstimate {
        point,
        interval: percentile_interval(values, point),
        n_valid,
        n_skipped,
    })
}

/// Bootstraps `metric` over resampled copies of `records`.
pub fn bootstrap<T, F>(metric: F, records: &[T], n_boot: usize, seed: u64) -> Result<BootstrapEstimate>
where
    T: Clone,
    F: Fn(&[T]) -> Result<f64>,
{
    bootstrap_indices(
        records.len(),
        |idx| {
            let sample: Vec<T> = idx.iter().map(|&i| records[i].clone()).collect();
            metric(&sample)
        },
        n_boot,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> Result<f64> {
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    #[test]
    fn constant_metric_has_degenerate_interval() {
        let est = bootstrap(|_: &[f64]| Ok(0.7), &[1.0, 2.0, 3.0], 200, 1).unwrap();
        assert_eq!(est.point, 0.7);
        assert_eq!(est.interval, Some((0.7, 0.7)));
    }

    #[test]
    fn bernoulli_mean_width_matches_normal_approximation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<f64> = (0..1000).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let est = bootstrap(mean, &draws, 1000, 5).unwrap();
        let (lo, hi) = est.interval.unwrap();
        let analytic = 2.0 * 1.96 * (0.25f64 / 1000.0).sqrt();
        let ratio = (hi - lo) / analytic;
        assert!((0.7..=1.3).contains(&ratio), "ratio {ratio}");
        assert!(lo <= est.point && est.point <= hi);
    }

    #[test]
    fn reproducible_and_skips_undefined() {
        let v: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = bootstrap(mean, &v, 300, 7).unwrap();
        let b = bootstrap(mean, &v, 300, 7).unwrap();
        assert_eq!(a, b);
        let c = bootstrap(mean, &v, 300, 8).unwrap();
        assert_ne!(a.interval, c.interval);

        let picky = |s: &[f64]| if s.contains(&0.0) { Ok(1.0) } else { Err(MetricError::NoPositiveRecords) };
        let est = bootstrap(picky, &v, 400, 3).unwrap();
        assert_eq!(est.n_valid + est.n_skipped, 400);
        assert!(est.n_skipped > 0 && est.n_valid > 0);
    }

    #[test]
    fn zero_resamples_gives_point_only() {
        let est = bootstrap(mean, &[1.0], 0, 0).unwrap();
        assert_eq!(est.point, 1.0);
        assert_eq!(est.interval, None);
        assert_eq!(bootstrap(mean, &[1.0], 10, 0), Err(MetricError::TooFewRecords(1)));
    }

    #[test]
    fn intervals_widen_as_n_shrinks() {
        let mut wider = 0;
        for trial in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let big: Vec<f64> = (0..800).map(|_| rng.random::<f64>()).collect();
            let small = &big[..100];
            let wb = bootstrap(mean, &big, 500, trial).unwrap().interval.unwrap();
            let ws = bootstrap(mean, small, 500, trial).unwrap().interval.unwrap();
            if ws.1 - ws.0 >= wb.1 - wb.0 {
                wider += 1;
            }
        }
        assert!(wider >= 9, "{wider}/10");
    }
}
