use serde::Serialize;

use super::bootstrap::{percentile_interval, resample_indices};
use super::{
    aurc, ece_from_correctness, f_beta, kappa_from_counts, MetricError, PenaltyMatrix, Result,
};
use crate::policy::Outcome;

/// One labelled, triaged record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub label: u8,
    /// Argmax of the calibrated probabilities.
    pub predicted: u8,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub outcome: Outcome,
}

impl EvalRecord {
    fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEstimate {
    /// `None` when the metric is undefined on the full evaluation set.
    pub point: Option<f64>,
    pub low: Option<f64>,
    pub high: Option<f64>,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
}

impl MetricEstimate {
    fn point_only(point: Option<f64>) -> Self {
        MetricEstimate {
            point,
            low: None,
            high: None,
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub binary_f2: MetricEstimate,
    pub clear_f2: MetricEstimate,
    pub binary_ece: MetricEstimate,
    pub clear_ece: MetricEstimate,
    pub coverage: MetricEstimate,
    pub tpdr: MetricEstimate,
    pub aurc: MetricEstimate,
    pub risk_kappa: MetricEstimate,
    pub n_records: usize,
    pub n_clear: usize,
    pub n_positive: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub ece_bins: usize,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// `(column name, estimate)` in table order.
    pub fn columns(&self) -> [(&'static str, &MetricEstimate); N_METRICS] {
        let e = [
            &self.binary_f2,
            &self.clear_f2,
            &self.binary_ece,
            &self.clear_ece,
            &self.coverage,
            &self.tpdr,
            &self.aurc,
            &self.risk_kappa,
        ];
        std::array::from_fn(|i| (COLUMN_NAMES[i], e[i]))
    }
}

const N_METRICS: usize = 8;

pub const COLUMN_NAMES: [&str; N_METRICS] = [
    "Binary F2",
    "Clear F2",
    "Binary ECE",
    "Clear ECE",
    "Coverage",
    "TPDR",
    "AURC",
    "Risk-Kappa",
];

fn f2_over<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in records {
        match (r.predicted, r.label) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    f_beta(tp, fp, fn_, 2.0)
}

fn ece_over<'a>(records: impl Iterator<Item = &'a EvalRecord>, bins: usize) -> Result<f64> {
    let (conf, correct): (Vec<f64>, Vec<bool>) = records.map(|r| (r.confidence, r.correct())).unzip();
    ece_from_correctness(&conf, &correct, bins)
}

/// All metrics on the records selected by `idx`, in [`MetricsReport::columns`] order.
fn compute_all(records: &[EvalRecord], idx: &[usize], w: &PenaltyMatrix, bins: usize) -> [Result<f64>; N_METRICS] {
    let sel = || idx.iter().map(|&i| &records[i]);
    let clear = || sel().filter(|r| r.outcome.is_clear());
    let n = idx.len();
    let n_clear = clear().count();
    let positives = sel().filter(|r| r.label == 1).count();
    let deferred_pos = sel().filter(|r| r.label == 1 && !r.outcome.is_clear()).count();

    let coverage = if n == 0 {
        Err(MetricError::EmptyEvaluationSet)
    } else {
        Ok(n_clear as f64 / n as f64)
    };
    let tpdr = if positives == 0 {
        Err(MetricError::NoPositiveRecords)
    } else {
        Ok(deferred_pos as f64 / positives as f64)
    };
    let (conf, correct): (Vec<f64>, Vec<bool>) = sel().map(|r| (r.confidence, r.correct())).unzip();
    let mut counts = [[0usize; 3]; 2];
    for r in sel() {
        counts[PenaltyMatrix::row(r.label)][PenaltyMatrix::column(r.outcome)] += 1;
    }
    [
        f2_over(sel()),
        f2_over(clear()),
        ece_over(sel(), bins),
        ece_over(clear(), bins),
        coverage,
        tpdr,
        aurc(&conf, &correct),
        kappa_from_counts(&counts, w),
    ]
}

/// Binary metrics use argmax predictions on every record; Clear metrics
/// restrict to automated records. Every metric gets a percentile bootstrap
/// interval over shared resamples.
pub fn evaluate(
    records: &[EvalRecord],
    w: &PenaltyMatrix,
    n_boot: usize,
    seed: u64,
    ece_bins: usize,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(MetricError::EmptyEvaluationSet);
    }
    if n_boot > 0 && records.len() < 2 {
        return Err(MetricError::TooFewRecords(records.len()));
    }
    w.validate()?;
    let all: Vec<usize> = (0..records.len()).collect();
    let points = compute_all(records, &all, w, ece_bins);

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_boot); N_METRICS];
    let mut skipped = [0usize; N_METRICS];
    for b in 0..n_boot as u64 {
        let idx = resample_indices(records.len(), seed, b);
        for (m, v) in compute_all(records, &idx, w, ece_bins).into_iter().enumerate() {
            match v {
                Ok(v) => samples[m].push(v),
                Err(_) => skipped[m] += 1,
            }
        }
    }

    let mut estimates: Vec<MetricEstimate> = points
        .iter()
        .zip(samples)
        .zip(skipped)
        .map(|((p, s), sk)| match p {
            Ok(p) => {
                let iv = percentile_interval(s, *p);
                MetricEstimate {
                    point: Some(*p),
                    low: iv.map(|i| i.0),
                    high: iv.map(|i| i.1),
                    skipped: sk,
                }
            }
            Err(_) => MetricEstimate::point_only(None),
        })
        .collect();

    let n_clear = records.iter().filter(|r| r.outcome.is_clear()).count();
    let n_positive = records.iter().filter(|r| r.label == 1).count();
    let mut warnings = Vec::new();
    if n_clear == 0 {
        warnings.push("no records were automated; Clear metrics are undefined".to_string());
    }
    if n_positive == 0 {
        warnings.push("no positive records; TPDR is undefined".to_string());
    }
    for (name, p) in COLUMN_NAMES.iter().zip(&points) {
        if let Err(e) = p {
            if n_clear > 0 || !name.starts_with("Clear") {
                warnings.push(format!("{name} undefined: {e}"));
            }
        }
    }

    let mut take = || estimates.remove(0);
    Ok(MetricsReport {
        binary_f2: take(),
        clear_f2: take(),
        binary_ece: take(),
        clear_ece: take(),
        coverage: take(),
        tpdr: take(),
        aurc: take(),
        risk_kappa: take(),
        n_records: records.len(),
        n_clear,
        n_positive,
        n_boot,
        seed,
        ece_bins,
        warnings,
    })
}

fn fmt_point(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

fn fmt_interval(e: &MetricEstimate) -> String {
    match (e.low, e.high) {
        (Some(l), Some(h)) => format!("[{l:.3}, {h:.3}]"),
        _ => String::new(),
    }
}

/// Aligned text table: one block per labelled report, point estimates on
/// the first line and 95% intervals beneath.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let col_w = 16;
    let mut out = format!("{:<label_w$}", "");
    for n in COLUMN_NAMES {
        out.push_str(&format!(" {n:>col_w$}"));
    }
    out.push('\n');
    for (label, rep) in rows {
        let cols = rep.columns();
        out.push_str(&format!("{label:<label_w$}"));
        for (_, e) in &cols {
            out.push_str(&format!(" {:>col_w$}", fmt_point(e.point)));
        }
        out.push('\n');
        out.push_str(&format!("{:<label_w$}", ""));
        for (_, e) in &cols {
            out.push_str(&format!(" {:>col_w$}", fmt_interval(e)));
        }
        out.push('\n');
    }
    out
}
