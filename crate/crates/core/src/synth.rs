//! Deterministic synthetic cohorts with known ground truth.
//!
//! Both classes are equal-weight Gaussian mixtures with shared spherical
//! covariance `within_spread² I`. The base mode of class 0 sits at
//! `-class_separation/2 · e₀`, that of class 1 at `+class_separation/2 · e₀`;
//! mode `j ≥ 1` of either class is its base mode shifted by
//! `mode_separation · e_j`. Every center is offset by `anchor_norm · e_{d-1}`
//! so that L2 normalisation preserves the geometry. Planted out-of-distribution
//! records (test split only) sit at a randomly chosen mode shifted by
//! `ood_displacement · e_{d-2}`; their labels are drawn from the base rate.
//!
//! Member logits are `(-z/2, z/2)` with
//! `z = logit_sharpness · miscalibration_factor · (LLR(x) + log(π₁/π₀)) + ε`,
//! `ε ~ N(0, member_noise²)` drawn per member, where `LLR` is the exact
//! log-density ratio of the generating mixtures and `π` the validation
//! class proportions.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{format_real, Cohort, DatasetError, Record, Split, SplitKind};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    ConfigInvariantViolation(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("csv error: {0}")]
    Csv(String),
}

/// Per-class record counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

impl SplitCounts {
    fn get(&self, kind: SplitKind) -> [usize; 2] {
        match kind {
            SplitKind::Train => self.train,
            SplitKind::Val => self.val,
            SplitKind::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: SplitCounts,
    pub d: usize,
    pub centroids_per_class: [usize; 2],
    pub class_separation: f64,
    pub mode_separation: f64,
    pub within_spread: f64,
    pub anchor_norm: f64,
    /// Fraction of test records replaced by planted OOD records.
    pub ood_fraction: f64,
    pub ood_displacement: f64,
    pub logit_sharpness: f64,
    pub miscalibration_factor: f64,
    pub n_members: usize,
    pub member_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_per_class: SplitCounts {
                train: [0, 0],
                val: [1000, 1000],
                test: [1000, 1000],
            },
            d: 32,
            centroids_per_class: [1, 3],
            class_separation: 2.5,
            mode_separation: 6.0,
            within_spread: 1.0,
            anchor_norm: 20.0,
            ood_fraction: 0.05,
            ood_displacement: 10.0,
            logit_sharpness: 1.0,
            miscalibration_factor: 1.0,
            n_members: 3,
            member_noise: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::ConfigInvariantViolation(msg));
        let k_max = self.centroids_per_class[0].max(self.centroids_per_class[1]);
        if self.centroids_per_class.contains(&0) {
            return bad("centroids_per_class must be at least 1".into());
        }
        if self.d < k_max + 2 {
            return bad(format!("d = {} is too small for {k_max} modes (need at least {})", self.d, k_max + 2));
        }
        if !(self.within_spread > 0.0 && self.within_spread.is_finite()) {
            return bad("within_spread must be positive".into());
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("mode_separation", self.mode_separation),
            ("anchor_norm", self.anchor_norm),
            ("ood_displacement", self.ood_displacement),
            ("miscalibration_factor", self.miscalibration_factor),
            ("member_noise", self.member_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if k_max > 1 && self.mode_separation <= 0.0 {
            return bad("mode_separation must be positive for multi-modal classes".into());
        }
        if !(self.logit_sharpness > 0.0 && self.logit_sharpness.is_finite()) {
            return bad("logit_sharpness must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction must be in [0, 1), got {}", self.ood_fraction));
        }
        if self.ood_fraction > 0.0 && self.ood_displacement <= self.class_separation {
            return bad("ood_displacement must exceed class_separation when OOD records are planted".into());
        }
        if self.n_members == 0 {
            return bad("n_members must be at least 1".into());
        }
        let total: usize = [self.n_per_class.train, self.n_per_class.val, self.n_per_class.test]
            .iter()
            .flatten()
            .sum();
        if total == 0 {
            return bad("at least one record must be generated".into());
        }
        Ok(())
    }

    /// Validation class proportions, used as the generating base rate.
    pub fn base_rate(&self) -> f64 {
        let [n0, n1] = self.n_per_class.val;
        if n0 + n1 == 0 {
            0.5
        } else {
            n1 as f64 / (n0 + n1) as f64
        }
    }

    fn center(&self, class: u8, component: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        c[0] = if class == 1 { 0.5 } else { -0.5 } * self.class_separation;
        if component > 0 {
            c[component] += self.mode_separation;
        }
        c[self.d - 1] = self.anchor_norm;
        c
    }

    /// Log-density of `x` under the class-`class` mixture, up to a constant
    /// shared by both classes.
    fn log_density(&self, x: &[f64], class: u8) -> f64 {
        let k = self.centroids_per_class[class as usize];
        let s2 = self.within_spread * self.within_spread;
        let terms: Vec<f64> = (0..k)
            .map(|j| {
                let c = self.center(class, j);
                -crate::geometry::sq_dist(x, &c) / (2.0 * s2)
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - (k as f64).ln()
    }

    /// Exact `log p(x|1)/p(x|0) + log(π₁/π₀)`.
    pub fn true_log_odds(&self, x: &[f64]) -> f64 {
        let pi1 = self.base_rate().clamp(1e-12, 1.0 - 1e-12);
        self.log_density(x, 1) - self.log_density(x, 0) + (pi1 / (1.0 - pi1)).ln()
    }
}

/// Generating facts for one id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub id: String,
    /// Mixture component (of the labelled class for in-distribution records,
    /// of the class whose mode was displaced for OOD records).
    pub component: usize,
    pub is_ood: bool,
    /// Bayes posterior of class 1; the base rate for OOD records.
    pub true_posterior_1: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub cohort: Cohort,
    /// Sorted by id, aligned with `cohort.patients()`.
    pub truth: Vec<GroundTruth>,
}

fn sample_point(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + spread * z
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.member_noise).expect("validated noise");
    let pi1 = config.base_rate();
    let slope = config.logit_sharpness * config.miscalibration_factor;

    let total: usize = [SplitKind::Train, SplitKind::Val, SplitKind::Test]
        .iter()
        .map(|&k| config.n_per_class.get(k).iter().sum::<usize>())
        .sum();
    let width = total.to_string().len().max(6);

    let mut records = Vec::with_capacity(total * config.n_members);
    let mut truth = Vec::with_capacity(total);
    let mut next_id = 0usize;
    for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
        let [n0, n1] = config.n_per_class.get(kind);
        let mut labels: Vec<u8> = std::iter::repeat_n(0u8, n0).chain(std::iter::repeat_n(1u8, n1)).collect();
        labels.shuffle(&mut rng);
        let n = labels.len();
        let mut ood = vec![false; n];
        if kind == SplitKind::Test {
            let n_ood = (config.ood_fraction * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..n_ood] {
                ood[i] = true;
            }
        }

        for (label, is_ood) in labels.into_iter().zip(ood) {
            next_id += 1;
            let id = format!("p{next_id:0width$}");
            let (label, component, x, posterior) = if is_ood {
                let source = u8::from(rng.random::<f64>() < 0.5);
                let component = rng.random_range(0..config.centroids_per_class[source as usize]);
                let mut c = config.center(source, component);
                c[config.d - 2] += config.ood_displacement;
                let x = sample_point(&mut rng, &c, config.within_spread);
                let label = u8::from(rng.random::<f64>() < pi1);
                (label, component, x, pi1)
            } else {
                let component = rng.random_range(0..config.centroids_per_class[label as usize]);
                let c = config.center(label, component);
                let x = sample_point(&mut rng, &c, config.within_spread);
                let posterior = 1.0 / (1.0 + (-config.true_log_odds(&x)).exp());
                (label, component, x, posterior)
            };
            let z0 = slope * config.true_log_odds(&x);
            for member in 0..config.n_members {
                let z = z0 + if config.member_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                records.push(Record {
                    id: id.clone(),
                    split: Split { kind, fold: None },
                    label: Some(label),
                    member_id: member as u32,
                    logits: [-0.5 * z, 0.5 * z],
                    embedding: x.clone(),
                });
            }
            truth.push(GroundTruth {
                id,
                component,
                is_ood,
                true_posterior_1: posterior,
            });
        }
    }
    truth.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SynthOutput {
        cohort: Cohort::from_records(records)?,
        truth,
    })
}

/// Writes the ground-truth sidecar: `id,component,is_ood,true_posterior_1`.
pub fn write_truth<W: Write>(truth: &[GroundTruth], writer: W) -> Result<(), SynthError> {
    let csv_err = |e: csv::Error| SynthError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "component", "is_ood", "true_posterior_1"]).map_err(csv_err)?;
    for t in truth {
        w.write_record([
            t.id.clone(),
            t.component.to_string(),
            u8::from(t.is_ood).to_string(),
            format_real(t.true_posterior_1),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| SynthError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{write_cohort, ColumnMap};
    use crate::geometry::kmeans::select_k;
    use crate::geometry::l2_normalize;
    use crate::metrics::ece;
    use crate::stats::{argmax2, softmax2};
    use crate::temperature::mean_nll;
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    fn unimodal(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_per_class: SplitCounts {
                train: [0, 0],
                val: [n / 2, n / 2],
                test: [0, 0],
            },
            d: 4,
            centroids_per_class: [1, 1],
            ood_fraction: 0.0,
            n_members: 1,
            member_noise: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn bayes_accuracy_matches_gaussian_overlap() {
        let cfg = unimodal(50_000, 1);
        let out = generate(&cfg).unwrap();
        let hits = out
            .cohort
            .patients()
            .iter()
            .zip(&out.truth)
            .filter(|(p, t)| u8::from(t.true_posterior_1 > 0.5) == p.label.unwrap())
            .count();
        let acc = hits as f64 / out.truth.len() as f64;
        let expected = StatNormal::new(0.0, 1.0)
            .unwrap()
            .cdf(cfg.class_separation / (2.0 * cfg.within_spread));
        assert!((acc - expected).abs() < 0.01, "{acc} vs {expected}");
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = SynthConfig {
            n_per_class: SplitCounts {
                train: [20, 10],
                val: [50, 50],
                test: [40, 40],
            },
            ..SynthConfig::default()
        };
        let render = |c: &SynthConfig| {
            let out = generate(c).unwrap();
            let mut a = Vec::new();
            write_cohort(&out.cohort, &mut a, &ColumnMap::default()).unwrap();
            write_truth(&out.truth, &mut a).unwrap();
            a
        };
        assert_eq!(render(&cfg), render(&cfg));
        assert_ne!(render(&cfg), render(&SynthConfig { seed: 1, ..cfg.clone() }));
    }

    #[test]
    fn planted_modes_are_recovered() {
        let cfg = SynthConfig {
            n_per_class: SplitCounts {
                train: [0, 0],
                val: [600, 600],
                test: [0, 0],
            },
            ood_fraction: 0.0,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        for class in 0..2u8 {
            let pts: Vec<Vec<f64>> = out
                .cohort
                .labeled(SplitKind::Val)
                .filter(|(_, l)| *l == class)
                .map(|(p, _)| l2_normalize(p.reference_embedding()).unwrap())
                .collect();
            let sel = select_k(&pts, 0.05, 20, 10, 3).unwrap();
            assert_eq!(sel.k, cfg.centroids_per_class[class as usize], "class {class}: {:?}", sel.inertias);
        }
    }

    #[test]
    fn unit_factor_logits_are_calibrated() {
        let cfg = unimodal(60_000, 2);
        let out = generate(&cfg).unwrap();
        let mut bins = [(0usize, 0.0f64, 0usize); 10];
        for p in out.cohort.patients() {
            let q = softmax2(p.members[0].logits, 1.0);
            let pred = argmax2(q);
            let conf = q[pred as usize];
            let b = ((conf * 10.0) as usize).min(9);
            bins[b].0 += 1;
            bins[b].1 += conf;
            bins[b].2 += usize::from(pred == p.label.unwrap());
        }
        for (n, conf, hits) in bins {
            if n >= 1000 {
                let gap = (hits as f64 / n as f64 - conf / n as f64).abs();
                assert!(gap < 0.02, "bin with {n} records has gap {gap}");
            }
        }
    }

    #[test]
    fn miscalibration_raises_nll_and_ece() {
        let nll_ece = |factor: f64| {
            let out = generate(&SynthConfig {
                miscalibration_factor: factor,
                ..unimodal(20_000, 3)
            })
            .unwrap();
            let logits: Vec<[f64; 2]> = out.cohort.patients().iter().map(|p| p.members[0].logits).collect();
            let labels: Vec<u8> = out.cohort.patients().iter().map(|p| p.label.unwrap()).collect();
            let probs: Vec<[f64; 2]> = logits.iter().map(|&l| softmax2(l, 1.0)).collect();
            let pred: Vec<u8> = probs.iter().map(|&p| argmax2(p)).collect();
            let conf: Vec<f64> = probs.iter().zip(&pred).map(|(p, &y)| p[y as usize]).collect();
            (mean_nll(&logits, &labels, 1.0), ece(&conf, &pred, &labels, 10).unwrap())
        };
        let (nll1, ece1) = nll_ece(1.0);
        let (nll3, ece3) = nll_ece(3.0);
        assert!(nll3 > nll1 && ece3 > ece1);
    }

    #[test]
    fn ood_records_only_in_test_and_displaced() {
        let cfg = SynthConfig::default();
        let out = generate(&cfg).unwrap();
        let n_test = out.cohort.split(SplitKind::Test).count();
        let mut n_ood = 0;
        for (p, t) in out.cohort.patients().iter().zip(&out.truth) {
            assert_eq!(p.id, t.id);
            if t.is_ood {
                n_ood += 1;
                assert_eq!(p.split.kind, SplitKind::Test);
                assert!(p.reference_embedding()[cfg.d - 2] > cfg.ood_displacement / 2.0);
            }
        }
        assert_eq!(n_ood, (cfg.ood_fraction * n_test as f64).round() as usize);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { d: 3, ..base.clone() },
            SynthConfig { within_spread: 0.0, ..base.clone() },
            SynthConfig { ood_fraction: 1.0, ..base.clone() },
            SynthConfig { ood_displacement: 1.0, ..base.clone() },
            SynthConfig { n_members: 0, ..base.clone() },
            SynthConfig { centroids_per_class: [0, 1], ..base.clone() },
            SynthConfig { miscalibration_factor: -1.0, ..base.clone() },
        ] {
            assert!(matches!(generate(&cfg), Err(SynthError::ConfigInvariantViolation(_))), "{cfg:?}");
        }
    }
}
