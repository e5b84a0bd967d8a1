//! Risk-aware evaluation of forced-binary and post-deferral predictions.

mod bootstrap;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{bootstrap, bootstrap_indices, resample_indices, BootstrapEstimate};
pub use report::{evaluate, render_table, EvalRecord, MetricEstimate, MetricsReport};

use crate::policy::Outcome;
use crate::stats::compensated_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no positive evidence (tp + fp + fn = 0)")]
    NoPositiveEvidence,
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("no positive records")]
    NoPositiveRecords,
    #[error("expected cost is zero while observed cost is positive")]
    DegenerateExpectedCost,
    #[error("bootstrap needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid penalty matrix: {0}")]
    InvalidPenalty(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// 2×3 penalty matrix. Rows: true positive, true negative. Columns:
/// ClearPositive, Defer, ClearNegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub w: [[f64; 3]; 2],
}

impl PenaltyMatrix {
    /// Builds `[[0, def_tp, fn], [fp, def_tn, 0]]`.
    pub fn from_weights(w_fn: f64, w_fp: f64, def_tn: f64, def_tp: f64) -> Self {
        PenaltyMatrix {
            w: [[0.0, def_tp, w_fn], [w_fp, def_tn, 0.0]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MetricError::InvalidPenalty("entries must be finite and non-negative".into()));
        }
        if self.w[0][0] != 0.0 || self.w[1][2] != 0.0 {
            return Err(MetricError::InvalidPenalty(
                "correct automation must carry zero penalty".into(),
            ));
        }
        Ok(())
    }

    pub fn row(label: u8) -> usize {
        if label == 1 {
            0
        } else {
            1
        }
    }

    pub fn column(outcome: Outcome) -> usize {
        match outcome {
            Outcome::ClearPositive => 0,
            Outcome::Defer => 1,
            Outcome::ClearNegative => 2,
        }
    }

    pub fn weight(&self, label: u8, outcome: Outcome) -> f64 {
        self.w[Self::row(label)][Self::column(outcome)]
    }
}

impl Default for PenaltyMatrix {
    fn default() -> Self {
        PenaltyPreset::DefaultBaseline.matrix()
    }
}

/// Named health-economic penalty scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyPreset {
    ZeroCostDeferral,
    ExtremeEpidemiological,
    DefaultBaseline,
    SymmetricControl,
    HighAdminBurden,
}

impl PenaltyPreset {
    pub const ALL: [PenaltyPreset; 5] = [
        PenaltyPreset::ZeroCostDeferral,
        PenaltyPreset::ExtremeEpidemiological,
        PenaltyPreset::DefaultBaseline,
        PenaltyPreset::SymmetricControl,
        PenaltyPreset::HighAdminBurden,
    ];

    /// `(fn, fp, def_tn, def_tp)`.
    pub fn weights(self) -> (f64, f64, f64, f64) {
        match self {
            PenaltyPreset::ZeroCostDeferral => (1.0, 1.0, 0.0, 0.0),
            PenaltyPreset::ExtremeEpidemiological => (1.0, 0.25, 0.1, 0.25),
            PenaltyPreset::DefaultBaseline => (1.0, 0.5, 0.25, 0.5),
            PenaltyPreset::SymmetricControl => (1.0, 1.0, 0.5, 0.5),
            PenaltyPreset::HighAdminBurden => (1.0, 0.75, 0.5, 0.75),
        }
    }

    pub fn matrix(self) -> PenaltyMatrix {
        let (a, b, c, d) = self.weights();
        PenaltyMatrix::from_weights(a, b, c, d)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyPreset::ZeroCostDeferral => "zero-cost-deferral",
            PenaltyPreset::ExtremeEpidemiological => "extreme-epidemiological",
            PenaltyPreset::DefaultBaseline => "default",
            PenaltyPreset::SymmetricControl => "symmetric-control",
            PenaltyPreset::HighAdminBurden => "high-admin-burden",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            PenaltyPreset::ZeroCostDeferral => "Zero-Cost Deferral",
            PenaltyPreset::ExtremeEpidemiological => "Extreme Epidemiological",
            PenaltyPreset::DefaultBaseline => "Default Baseline",
            PenaltyPreset::SymmetricControl => "Symmetric Control",
            PenaltyPreset::HighAdminBurden => "High Admin Burden",
        }
    }
}

impl fmt::Display for PenaltyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PenaltyPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        PenaltyPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == key || (key == "default-baseline" && *p == PenaltyPreset::DefaultBaseline))
            .ok_or_else(|| format!("unknown penalty preset `{s}`"))
    }
}

/// `F_beta` from confusion counts: `(1+β²)tp / ((1+β²)tp + β²fn + fp)`.
pub fn f_beta(tp: usize, fp: usize, fn_: usize, beta: f64) -> Result<f64> {
    if tp + fp + fn_ == 0 {
        return Err(MetricError::NoPositiveEvidence);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let tp = tp as f64;
    Ok((1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ as f64 + fp as f64))
}

/// Equal-width-bin expected calibration error over predicted-class
/// confidences.
pub fn ece(confidences: &[f64], predicted: &[u8], labels: &[u8], n_bins: usize) -> Result<f64> {
    if confidences.len() != predicted.len() || confidences.len() != labels.len() {
        return Err(MetricError::LengthMismatch(confidences.len(), labels.len()));
    }
    let correct: Vec<bool> = predicted.iter().zip(labels).map(|(p, l)| p == l).collect();
    ece_from_correctness(confidences, &correct, n_bins)
}

pub fn ece_from_correctness(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(MetricError::EmptyEvaluationSet);
    }
    let n_bins = n_bins.max(1);
    let mut conf_sum: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        conf_sum[b].push(c);
        hits[b] += usize::from(ok);
    }
    // Σ_b (n_b/N)|acc_b - conf_b| = Σ_b |hits_b - Σ conf_b| / N
    let gaps = conf_sum
        .into_iter()
        .zip(hits)
        .map(|(cs, h)| (h as f64 - compensated_sum(cs)).abs());
    Ok(compensated_sum(gaps) / confidences.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriageRates {
    pub coverage: f64,
    /// `None` when there are no positive records.
    pub tpdr: Option<f64>,
}

/// Coverage = #Clear / N; TPDR = #(Defer ∧ positive) / #positive.
pub fn coverage_tpdr(decisions: &[Outcome], labels: &[u8]) -> Result<TriageRates> {
    if decisions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(decisions.len(), labels.len()));
    }
    if decisions.is_empty() {
        return Err(MetricError::EmptyEvaluationSet);
    }
    let n = decisions.len() as f64;
    let clear = decisions.iter().filter(|d| d.is_clear()).count();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let deferred_pos = decisions
        .iter()
        .zip(labels)
        .filter(|(d, &l)| !d.is_clear() && l == 1)
        .count();
    Ok(TriageRates {
        coverage: clear as f64 / n,
        tpdr: (positives > 0).then(|| deferred_pos as f64 / positives as f64),
    })
}

/// Area under the risk-coverage curve for a confidence ranking. Ties keep
/// input order.
pub fn aurc(confidences: &[f64], correct: &[bool]) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(MetricError::LengthMismatch(confidences.len(), correct.len()));
    }
    if confidences.is_empty() {
        return Err(MetricError::EmptyEvaluationSet);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut errors = 0usize;
    let risks = order.iter().enumerate().map(|(k, &i)| {
        errors += usize::from(!correct[i]);
        errors as f64 / (k + 1) as f64
    });
    Ok(compensated_sum(risks) / confidences.len() as f64)
}

/// Chance-corrected agreement `1 - O_cost / E_cost`, with `E` the
/// independence product of the row and column marginals of `O`.
pub fn risk_kappa(decisions: &[Outcome], labels: &[u8], w: &PenaltyMatrix) -> Result<f64> {
    if decisions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(decisions.len(), labels.len()));
    }
    if decisions.is_empty() {
        return Err(MetricError::EmptyEvaluationSet);
    }
    let mut counts = [[0usize; 3]; 2];
    for (&d, &l) in decisions.iter().zip(labels) {
        counts[PenaltyMatrix::row(l)][PenaltyMatrix::column(d)] += 1;
    }
    kappa_from_counts(&counts, w)
}

pub(crate) fn kappa_from_counts(counts: &[[usize; 3]; 2], w: &PenaltyMatrix) -> Result<f64> {
    let n: usize = counts.iter().flatten().sum();
    if n == 0 {
        return Err(MetricError::EmptyEvaluationSet);
    }
    let n = n as f64;
    let obs: Vec<[f64; 3]> = counts
        .iter()
        .map(|r| [r[0] as f64 / n, r[1] as f64 / n, r[2] as f64 / n])
        .collect();
    let rows: Vec<f64> = obs.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..3).map(|j| obs[0][j] + obs[1][j]).collect();
    let mut o_cost = 0.0;
    let mut e_cost = 0.0;
    for i in 0..2 {
        for j in 0..3 {
            o_cost += w.w[i][j] * obs[i][j];
            e_cost += w.w[i][j] * rows[i] * cols[j];
        }
    }
    if e_cost == 0.0 {
        return if o_cost == 0.0 {
            Ok(1.0)
        } else {
            Err(MetricError::DegenerateExpectedCost)
        };
    }
    Ok(1.0 - o_cost / e_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Outcome::*;

    #[test]
    fn f_beta_examples() {
        assert_eq!(f_beta(10, 0, 0, 2.0).unwrap(), 1.0);
        assert!((f_beta(8, 4, 2, 2.0).unwrap() - 8.0 / 10.4).abs() < 1e-12);
        assert_eq!(f_beta(0, 3, 1, 2.0).unwrap(), 0.0);
        assert_eq!(f_beta(0, 0, 0, 2.0), Err(MetricError::NoPositiveEvidence));
        // P = R = 0.75 when fp = fn
        assert!((f_beta(3, 1, 1, 2.0).unwrap() - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 1usize..200, fp in 0usize..200, fn_ in 0usize..200) {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            let h = 2.0 * p * r / (p + r);
            prop_assert!((f_beta(tp, fp, fn_, 1.0).unwrap() - h).abs() < 1e-12);
        }

        #[test]
        fn ece_is_bounded(conf in proptest::collection::vec(0.5f64..=1.0, 1..200), seed in any::<u64>()) {
            let correct: Vec<bool> = conf.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let e = ece_from_correctness(&conf, &correct, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn aurc_invariant_under_monotone_maps(conf in proptest::collection::vec(0.0f64..1.0, 1..100), bits in any::<u128>()) {
            let correct: Vec<bool> = (0..conf.len()).map(|i| (bits >> (i % 128)) & 1 == 1).collect();
            let a = aurc(&conf, &correct).unwrap();
            let mapped: Vec<f64> = conf.iter().map(|c| (3.0 * c).exp() - 7.0).collect();
            prop_assert_eq!(a, aurc(&mapped, &correct).unwrap());
        }

        #[test]
        fn moving_into_penalised_cell_lowers_kappa(
            labels in proptest::collection::vec(0u8..2, 4..60),
            noise in proptest::collection::vec(0usize..8, 60),
            target in any::<proptest::sample::Index>(),
        ) {
            // mostly correct Clear decisions, the rest spread over all cells
            let all = [ClearPositive, Defer, ClearNegative];
            let correct = |l: u8| if l == 1 { ClearPositive } else { ClearNegative };
            let decisions: Vec<Outcome> = labels
                .iter()
                .zip(&noise)
                .map(|(&l, &n)| if n < 5 { correct(l) } else { all[n - 5] })
                .collect();
            let w = PenaltyMatrix::default();
            let zero_cells: Vec<usize> = (0..labels.len())
                .filter(|&i| w.weight(labels[i], decisions[i]) == 0.0)
                .collect();
            let Ok(before) = risk_kappa(&decisions, &labels, &w) else { return Ok(()) };
            if before <= 0.0 || zero_cells.is_empty() {
                return Ok(());
            }
            let i = zero_cells[target.index(zero_cells.len())];
            for d in all {
                if w.weight(labels[i], d) > 0.0 {
                    let mut moved = decisions.clone();
                    moved[i] = d;
                    let after = risk_kappa(&moved, &labels, &w).unwrap();
                    prop_assert!(after < before, "{before} -> {after}");
                }
            }
        }
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 5], &[1, 0, 1, 1, 0], &[1, 0, 1, 1, 0], 10).unwrap(), 0.0);
        let pred = [1u8; 10];
        let eight: Vec<u8> = (0..10).map(|i| u8::from(i < 8)).collect();
        assert_eq!(ece(&[0.8; 10], &pred, &eight, 10).unwrap(), 0.0);
        let six: Vec<u8> = (0..10).map(|i| u8::from(i < 6)).collect();
        assert_eq!(ece(&[0.9; 10], &pred, &six, 10).unwrap(), 0.3);
        assert_eq!(ece(&[], &[], &[], 10), Err(MetricError::EmptyEvaluationSet));
    }

    #[test]
    fn coverage_tpdr_examples() {
        let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let all_clear = [ClearPositive; 10];
        let r = coverage_tpdr(&all_clear, &labels).unwrap();
        assert_eq!((r.coverage, r.tpdr), (1.0, Some(0.0)));
        let r = coverage_tpdr(&[Defer; 10], &labels).unwrap();
        assert_eq!((r.coverage, r.tpdr), (0.0, Some(1.0)));
        let mixed = [
            Defer, Defer, ClearPositive, ClearNegative, Defer, ClearNegative, ClearNegative,
            ClearNegative, ClearPositive, ClearNegative,
        ];
        let r = coverage_tpdr(&mixed, &labels).unwrap();
        assert!((r.coverage - 0.7).abs() < 1e-15);
        assert_eq!(r.tpdr, Some(0.5));
        assert_eq!(coverage_tpdr(&[Defer], &[0]).unwrap().tpdr, None);
    }

    #[test]
    fn aurc_examples() {
        assert_eq!(aurc(&[0.9, 0.8, 0.7], &[true; 3]).unwrap(), 0.0);
        assert_eq!(aurc(&[0.9, 0.8, 0.7], &[false; 3]).unwrap(), 1.0);
        let a = aurc(&[0.6, 0.9, 0.7, 0.8], &[true, true, false, true]).unwrap();
        // descending confidence gives correctness [1, 1, 0, 1] → risks 0, 0, 1/3, 1/4
        assert!((a - (1.0 / 3.0 + 0.25) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_perfect_and_independent() {
        let labels = [1, 1, 0, 0, 0];
        let perfect = [ClearPositive, ClearPositive, ClearNegative, ClearNegative, ClearNegative];
        assert_eq!(risk_kappa(&perfect, &labels, &PenaltyMatrix::default()).unwrap(), 1.0);

        // rows (1/4, 3/4) × columns (1/2, 1/4, 1/4) on N = 16
        let mut d = Vec::new();
        let mut l = Vec::new();
        for (label, counts) in [(1u8, [2, 1, 1]), (0u8, [6, 3, 3])] {
            for (outcome, c) in [ClearPositive, Defer, ClearNegative].into_iter().zip(counts) {
                d.extend(std::iter::repeat_n(outcome, c));
                l.extend(std::iter::repeat_n(label, c));
            }
        }
        assert_eq!(risk_kappa(&d, &l, &PenaltyMatrix::default()).unwrap(), 0.0);
    }

    #[test]
    fn kappa_hand_computed_reference() {
        // 20 pos: 15 CP, 4 D, 1 CN; 80 neg: 6 CP, 10 D, 64 CN
        // O_cost = (4·0.5 + 1·1 + 6·0.5 + 10·0.25)/100 = 8.5/100 = 0.085
        // rows (0.2, 0.8), cols (0.21, 0.14, 0.65)
        // E_cost = 0.2(0.14·0.5 + 0.65·1) + 0.8(0.21·0.5 + 0.14·0.25)
        //        = 0.2·0.72 + 0.8·0.14 = 0.144 + 0.112 = 0.256
        // κ = 1 - 0.085/0.256 = 0.66796875
        let mut d = Vec::new();
        let mut l = Vec::new();
        for (label, counts) in [(1u8, [15, 4, 1]), (0u8, [6, 10, 64])] {
            for (outcome, c) in [ClearPositive, Defer, ClearNegative].into_iter().zip(counts) {
                d.extend(std::iter::repeat_n(outcome, c));
                l.extend(std::iter::repeat_n(label, c));
            }
        }
        let k = risk_kappa(&d, &l, &PenaltyMatrix::default()).unwrap();
        assert!((k - 0.66796875).abs() < 1e-12, "{k}");
    }

    #[test]
    fn kappa_degenerate_expected_cost() {
        // all deferred under zero-cost deferral: E = O = 0
        let zero = PenaltyPreset::ZeroCostDeferral.matrix();
        assert_eq!(risk_kappa(&[Defer; 4], &[1, 0, 1, 0], &zero).unwrap(), 1.0);
        // only one column populated with a positive weight → E = O > 0, κ = 0
        assert_eq!(risk_kappa(&[ClearPositive; 2], &[0, 0], &PenaltyMatrix::default()).unwrap(), 0.0);
        assert_eq!(risk_kappa(&[], &[], &zero), Err(MetricError::EmptyEvaluationSet));
    }

    #[test]
    fn default_matrix_layout() {
        let w = PenaltyMatrix::default();
        assert_eq!(w.w, [[0.0, 0.5, 1.0], [0.5, 0.25, 0.0]]);
        assert_eq!(w.weight(1, ClearNegative), 1.0);
        assert_eq!(w.weight(0, ClearPositive), 0.5);
        assert_eq!(w.weight(1, Defer), 0.5);
        assert_eq!(w.weight(0, Defer), 0.25);
        for p in PenaltyPreset::ALL {
            p.matrix().validate().unwrap();
            assert_eq!(p.as_str().parse::<PenaltyPreset>().unwrap(), p);
        }
    }
}
