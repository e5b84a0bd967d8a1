//! End-to-end workflow: fit a calibration artifact, triage, evaluate, and
//! the sweep / ablation / penalty-scenario studies built on top of them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conformal::{fit_conformal, ConformalError};
use crate::dataset::{format_real, Cohort, DatasetError, SplitKind};
use crate::geometry::{l2_normalize, GeometricModel, GeometryConfig, GeometryError};
use crate::metrics::{
    bootstrap_indices, evaluate as evaluate_records, kappa_from_counts, EvalRecord, MetricError,
    MetricsReport, PenaltyMatrix, PenaltyPreset,
};
use crate::policy::{
    triage_split, Calibration, DeferReason, Outcome, PolicyConfig, PolicyError, PolicyKind,
    TriageDecision,
};
use crate::stats::argmax2;
use crate::synth::SynthError;
use crate::temperature::{fit_temperature, TemperatureError};

pub const ARTIFACT_FORMAT: &str = "dualveto-calibration";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset_io: {0}")]
    Dataset(#[from] DatasetError),
    #[error("temperature: {0}")]
    Temperature(#[from] TemperatureError),
    #[error("conformal: {0}")]
    Conformal(#[from] ConformalError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("policy: {0}")]
    Policy(PolicyError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("synthgen: {0}")]
    Synth(SynthError),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PolicyError> for Error {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Conformal(e) => Error::Conformal(e),
            PolicyError::Geometry(e) => Error::Geometry(e),
            PolicyError::Dataset(e) => Error::Dataset(e),
            e => Error::Policy(e),
        }
    }
}

impl From<SynthError> for Error {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Dataset(e) => Error::Dataset(e),
            e => Error::Synth(e),
        }
    }
}

impl Error {
    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        let numerical = matches!(
            self,
            Error::Geometry(GeometryError::IllConditionedCovariance | GeometryError::DegenerateResiduals(_))
                | Error::Metric(MetricError::DegenerateExpectedCost)
        );
        if numerical {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Every tunable of the workflow. Paths are the caller's business.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub percentile: f64,
    pub inertia_threshold: f64,
    /// `None` means `max(20, 1% of the class sample count)`.
    pub min_cluster_size: Option<usize>,
    pub k_max: usize,
    pub policy: PolicyKind,
    pub standard_uncertainty_percentile: f64,
    pub penalties: PenaltyMatrix,
    pub n_boot: usize,
    pub seed: u64,
    pub ece_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let g = GeometryConfig::default();
        PipelineConfig {
            alpha: p.alpha,
            percentile: p.percentile,
            inertia_threshold: g.inertia_threshold,
            min_cluster_size: g.min_cluster_size,
            k_max: g.k_max,
            policy: p.kind,
            standard_uncertainty_percentile: p.standard_uncertainty_percentile,
            penalties: PenaltyMatrix::default(),
            n_boot: 1000,
            seed: 0,
            ece_bins: 10,
        }
    }
}

impl PipelineConfig {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            alpha: self.alpha,
            percentile: self.percentile,
            inertia_threshold: self.inertia_threshold,
            kind: self.policy,
            standard_uncertainty_percentile: self.standard_uncertainty_percentile,
        }
    }

    pub fn geometry_config(&self) -> GeometryConfig {
        GeometryConfig {
            inertia_threshold: self.inertia_threshold,
            min_cluster_size: self.min_cluster_size,
            k_max: self.k_max,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_config().validate()?;
        self.penalties.validate()?;
        if !(self.inertia_threshold >= 0.0 && self.inertia_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "inertia_threshold must be finite and non-negative, got {}",
                self.inertia_threshold
            )));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Compact JSON, used for provenance lines and the fingerprint.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`PipelineConfig::to_json`], hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Self-describing calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub dim: usize,
    pub calibration: Calibration,
}

impl Artifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Artifact = serde_json::from_str(text).map_err(|e| Error::Artifact(e.to_string()))?;
        if a.format != ARTIFACT_FORMAT {
            return Err(Error::Artifact(format!("unexpected format `{}`", a.format)));
        }
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported version {} (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        if a.fingerprint != a.config.fingerprint() {
            return Err(Error::Artifact("fingerprint does not match the stored config".into()));
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that `config` only changes settings that can be applied
    /// without refitting (alpha, percentiles, policy, penalties, bootstrap).
    pub fn check_compatible(&self, config: &PipelineConfig) -> Result<()> {
        let fitted = &self.config;
        let mut diffs = Vec::new();
        if fitted.inertia_threshold != config.inertia_threshold {
            diffs.push("inertia_threshold");
        }
        if fitted.min_cluster_size != config.min_cluster_size {
            diffs.push("min_cluster_size");
        }
        if fitted.k_max != config.k_max {
            diffs.push("k_max");
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Policy(PolicyError::ConfigMismatch(format!(
                "{} differ from the fitted artifact; refit or use sweep",
                diffs.join(", ")
            ))))
        }
    }
}

/// Labelled validation patients as parallel arrays.
struct ValidationSet<'a> {
    patients: Vec<&'a crate::dataset::Patient>,
    labels: Vec<u8>,
}

fn validation_set(cohort: &Cohort) -> Result<ValidationSet<'_>> {
    let (patients, labels): (Vec<_>, Vec<u8>) = cohort.labeled(SplitKind::Val).unzip();
    if patients.is_empty() {
        return Err(DatasetError::EmptySplit("val".into()).into());
    }
    for class in 0..2u8 {
        if !labels.contains(&class) {
            return Err(ConformalError::MissingClassInCalibration(class).into());
        }
    }
    Ok(ValidationSet { patients, labels })
}

fn normalized_embeddings(patients: &[&crate::dataset::Patient]) -> Result<Vec<Vec<f64>>> {
    patients
        .iter()
        .map(|p| l2_normalize(p.reference_embedding()).map_err(Error::from))
        .collect()
}

fn fit_geometry(
    embeddings: &[Vec<f64>],
    predicted: &[u8],
    labels: &[u8],
    config: &PipelineConfig,
) -> Result<GeometricModel> {
    let mut model = GeometricModel::fit(embeddings, labels, &config.geometry_config())?;
    model.calibrate(embeddings, predicted, labels, config.percentile)?;
    Ok(model)
}

/// Fits temperatures, the conformal calibrator, validation entropies and
/// the geometric model on the labelled validation split.
pub fn fit(cohort: &Cohort, config: &PipelineConfig) -> Result<Artifact> {
    config.validate()?;
    let val = validation_set(cohort)?;

    let mut temperatures = Vec::with_capacity(cohort.member_count());
    for m in 0..cohort.member_count() {
        let logits: Vec<[f64; 2]> = val.patients.iter().map(|p| p.members[m].logits).collect();
        temperatures.push(fit_temperature(&logits, &val.labels)?);
    }
    let temps: Vec<f64> = temperatures.iter().map(|t| t.temperature).collect();
    let aggregates: Vec<_> = val.patients.iter().map(|p| p.aggregate(&temps)).collect();
    let probs: Vec<[f64; 2]> = aggregates.iter().map(|a| a.probs).collect();
    let conformal = fit_conformal(&probs, &val.labels)?;
    let mut entropies: Vec<f64> = aggregates.iter().map(|a| a.entropy).collect();
    entropies.sort_by(f64::total_cmp);

    let embeddings = normalized_embeddings(&val.patients)?;
    let predicted: Vec<u8> = probs.iter().map(|&p| argmax2(p)).collect();
    let geometry = fit_geometry(&embeddings, &predicted, &val.labels, config)?;

    Ok(Artifact {
        format: ARTIFACT_FORMAT.to_string(),
        version: ARTIFACT_VERSION,
        fingerprint: config.fingerprint(),
        config: config.clone(),
        dim: cohort.dim(),
        calibration: Calibration {
            member_ids: cohort.member_ids().to_vec(),
            temperatures,
            conformal: Some(conformal),
            geometry: Some(geometry),
            validation_entropies: entropies,
        },
    })
}

fn check_dim(cohort: &Cohort, artifact: &Artifact) -> Result<()> {
    if cohort.dim() != artifact.dim {
        return Err(GeometryError::DimensionMismatch {
            expected: artifact.dim,
            got: cohort.dim(),
        }
        .into());
    }
    Ok(())
}

/// Test-split decisions in id order.
pub fn triage(cohort: &Cohort, artifact: &Artifact, config: &PipelineConfig) -> Result<Vec<(String, TriageDecision)>> {
    config.validate()?;
    check_dim(cohort, artifact)?;
    artifact.check_compatible(config)?;
    Ok(triage_split(cohort, &artifact.calibration, &config.policy_config(), SplitKind::Test)?)
}

/// Coverage and defer-reason counts of a decision list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageSummary {
    pub n: usize,
    pub n_clear: usize,
    pub coverage: Option<f64>,
    pub reasons: BTreeMap<String, usize>,
}

impl TriageSummary {
    pub fn of(decisions: &[(String, TriageDecision)]) -> Self {
        let n = decisions.len();
        let n_clear = decisions.iter().filter(|(_, d)| d.outcome.is_clear()).count();
        let mut reasons = BTreeMap::new();
        for (_, d) in decisions {
            if let Some(r) = d.reason {
                *reasons.entry(r.as_str().to_string()).or_insert(0) += 1;
            }
        }
        TriageSummary {
            n,
            n_clear,
            coverage: (n > 0).then(|| n_clear as f64 / n as f64),
            reasons,
        }
    }
}

impl fmt::Display for TriageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cov = self.coverage.map_or_else(|| "n/a".into(), |c| format!("{c:.4}"));
        write!(f, "records={} clear={} coverage={cov}", self.n, self.n_clear)?;
        for (r, c) in &self.reasons {
            write!(f, " {r}={c}")?;
        }
        Ok(())
    }
}

/// Joins decisions with cohort labels. Unlabelled ids are skipped; every
/// labelled test id must have a decision.
pub fn evaluation_records(cohort: &Cohort, decisions: &[(String, TriageDecision)]) -> Result<Vec<EvalRecord>> {
    let mut seen = std::collections::HashSet::with_capacity(decisions.len());
    let mut out = Vec::with_capacity(decisions.len());
    for (id, d) in decisions {
        let p = cohort.patient(id)?;
        seen.insert(id.as_str());
        if let Some(label) = p.label {
            out.push(EvalRecord {
                label,
                predicted: d.predicted,
                confidence: d.confidence,
                outcome: d.outcome,
            });
        }
    }
    let missing = cohort
        .labeled(SplitKind::Test)
        .filter(|(p, _)| !seen.contains(p.id.as_str()))
        .count();
    if missing > 0 {
        return Err(Error::Config(format!("{missing} labelled test ids have no decision")));
    }
    if out.is_empty() {
        return Err(MetricError::EmptyEvaluationSet.into());
    }
    Ok(out)
}

pub fn evaluate(cohort: &Cohort, decisions: &[(String, TriageDecision)], config: &PipelineConfig) -> Result<MetricsReport> {
    config.validate()?;
    let records = evaluation_records(cohort, decisions)?;
    Ok(evaluate_records(&records, &config.penalties, config.n_boot, config.seed, config.ece_bins)?)
}

/// Grid for [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub inertia_thresholds: Vec<f64>,
    pub percentiles: Vec<f64>,
}

impl SweepGrid {
    /// Four inertia limits by five distance percentiles at one alpha.
    pub fn standard(alpha: f64) -> Self {
        SweepGrid {
            alphas: vec![alpha],
            inertia_thresholds: vec![0.01, 0.02, 0.05, 0.1],
            percentiles: vec![90.0, 95.0, 99.0, 99.5, 99.9],
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len() * self.inertia_thresholds.len() * self.percentiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub inertia_threshold: f64,
    pub percentile: f64,
    /// Selected centroid counts per class, when the geometric fit succeeded.
    pub k: Option<[usize; 2]>,
    pub coverage: Option<f64>,
    pub clear_f2: Option<f64>,
    pub tpdr: Option<f64>,
    pub risk_kappa: Option<f64>,
    /// `ok`, or the error that made this grid point fail.
    pub status: String,
}

/// Evaluates the policy at every grid point (point estimates). Centroids and
/// the precision matrix are refit once per inertia threshold; temperatures
/// and conformal scores come from the artifact. `sink` sees each row as soon
/// as it is computed; a failing grid point yields a row with its error in
/// `status` and the sweep continues.
pub fn sweep<F>(
    cohort: &Cohort,
    artifact: &Artifact,
    config: &PipelineConfig,
    grid: &SweepGrid,
    mut sink: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&SweepRow) -> Result<()>,
{
    config.validate()?;
    check_dim(cohort, artifact)?;
    let temps = artifact.calibration.temperature_values();
    let val = validation_set(cohort)?;
    cohort.check_temperatures(&temps)?;
    let embeddings = normalized_embeddings(&val.patients)?;
    let predicted: Vec<u8> = val
        .patients
        .iter()
        .map(|p| argmax2(p.aggregate(&temps).probs))
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for &inertia in &grid.inertia_thresholds {
        let refit_cfg = PipelineConfig {
            inertia_threshold: inertia,
            ..artifact.config.clone()
        };
        let geometry = if inertia == artifact.config.inertia_threshold {
            artifact
                .calibration
                .geometry
                .clone()
                .ok_or(Error::Policy(PolicyError::UnfittedCalibrator("geometry")))
        } else {
            fit_geometry(&embeddings, &predicted, &val.labels, &refit_cfg)
        };
        for &percentile in &grid.percentiles {
            for &alpha in &grid.alphas {
                let point = PipelineConfig {
                    alpha,
                    percentile,
                    inertia_threshold: inertia,
                    ..config.clone()
                };
                let row = match &geometry {
                    Ok(g) => sweep_point(cohort, artifact, g, &point),
                    Err(e) => Err(Error::Config(e.to_string())),
                };
                let row = row.unwrap_or_else(|e| SweepRow {
                    alpha,
                    inertia_threshold: inertia,
                    percentile,
                    k: geometry.as_ref().ok().map(|g| [g.k(0), g.k(1)]),
                    coverage: None,
                    clear_f2: None,
                    tpdr: None,
                    risk_kappa: None,
                    status: e.to_string(),
                });
                sink(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn sweep_point(cohort: &Cohort, artifact: &Artifact, geometry: &GeometricModel, config: &PipelineConfig) -> Result<SweepRow> {
    config.validate()?;
    let cal = Calibration {
        geometry: Some(geometry.clone()),
        ..artifact.calibration.clone()
    };
    let decisions = triage_split(cohort, &cal, &config.policy_config(), SplitKind::Test)?;
    let records = evaluation_records(cohort, &decisions)?;
    let rep = evaluate_records(&records, &config.penalties, 0, config.seed, config.ece_bins)?;
    Ok(SweepRow {
        alpha: config.alpha,
        inertia_threshold: config.inertia_threshold,
        percentile: config.percentile,
        k: Some([geometry.k(0), geometry.k(1)]),
        coverage: rep.coverage.point,
        clear_f2: rep.clear_f2.point,
        tpdr: rep.tpdr.point,
        risk_kappa: rep.risk_kappa.point,
        status: "ok".into(),
    })
}

/// Reports for the four policies, in ablation-table order.
pub fn ablate(cohort: &Cohort, artifact: &Artifact, config: &PipelineConfig) -> Result<Vec<(PolicyKind, MetricsReport)>> {
    PolicyKind::ALL
        .iter()
        .map(|&kind| {
            let cfg = PipelineConfig {
                policy: kind,
                ..config.clone()
            };
            let decisions = triage(cohort, artifact, &cfg)?;
            Ok((kind, evaluate(cohort, &decisions, &cfg)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub preset: PenaltyPreset,
    pub kappa: Option<f64>,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub skipped: usize,
    pub status: String,
}

/// Risk-Kappa under every named penalty preset.
pub fn kappa_scenarios(records: &[EvalRecord], n_boot: usize, seed: u64) -> Vec<ScenarioRow> {
    PenaltyPreset::ALL
        .iter()
        .map(|&preset| {
            let w = preset.matrix();
            let stat = |idx: &[usize]| {
                let mut counts = [[0usize; 3]; 2];
                for &i in idx {
                    let r = &records[i];
                    counts[PenaltyMatrix::row(r.label)][PenaltyMatrix::column(r.outcome)] += 1;
                }
                kappa_from_counts(&counts, &w)
            };
            match bootstrap_indices(records.len(), stat, n_boot, seed) {
                Ok(est) => ScenarioRow {
                    preset,
                    kappa: Some(est.point),
                    low: est.interval.map(|i| i.0),
                    high: est.interval.map(|i| i.1),
                    skipped: est.n_skipped,
                    status: "ok".into(),
                },
                Err(e) => ScenarioRow {
                    preset,
                    kappa: None,
                    low: None,
                    high: None,
                    skipped: 0,
                    status: e.to_string(),
                },
            }
        })
        .collect()
}

// ---- CSV outputs -------------------------------------------------------

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(DatasetError::Csv(e.to_string()))
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

/// Writes the `# dualveto <config>` provenance line.
pub fn write_provenance<W: Write>(mut w: W, config_json: &str) -> Result<()> {
    writeln!(w, "# dualveto {config_json}")?;
    Ok(())
}

pub const DECISION_COLUMNS: [&str; 9] = [
    "id",
    "outcome",
    "reason",
    "set_cardinality",
    "d_M",
    "tau",
    "confidence",
    "predicted_class",
    "entropy",
];

pub fn write_decisions<W: Write>(decisions: &[(String, TriageDecision)], config: &PipelineConfig, mut w: W) -> Result<()> {
    write_provenance(&mut w, &config.to_json())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DECISION_COLUMNS).map_err(csv_err)?;
    for (id, d) in decisions {
        out.write_record([
            id.clone(),
            d.outcome.as_str().to_string(),
            d.reason.map(|r| r.as_str().to_string()).unwrap_or_default(),
            d.set_cardinality.map(|c| c.to_string()).unwrap_or_default(),
            opt_real(d.distance),
            opt_real(d.tau),
            format_real(d.confidence),
            d.predicted.to_string(),
            format_real(d.entropy),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_decisions<R: Read>(reader: R) -> Result<Vec<(String, TriageDecision)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(DatasetError::MissingColumn(name.to_string())))
    };
    let cols: Vec<usize> = DECISION_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let field = |k: usize| row.get(cols[k]).unwrap_or("").trim();
        let bad = |k: usize| {
            Error::Dataset(DatasetError::Parse {
                row: i + 1,
                column: DECISION_COLUMNS[k].to_string(),
                value: field(k).to_string(),
            })
        };
        let real = |k: usize| field(k).parse::<f64>().map_err(|_| bad(k));
        let opt = |k: usize| if field(k).is_empty() { Ok(None) } else { real(k).map(Some) };
        let outcome: Outcome = field(1).parse().map_err(|_| bad(1))?;
        let reason = match field(2) {
            "" => None,
            s => Some(s.parse::<DeferReason>().map_err(|_| bad(2))?),
        };
        let set_cardinality = match field(3) {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad(3))?),
        };
        let predicted = match field(7) {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad(7)),
        };
        out.push((
            field(0).to_string(),
            TriageDecision {
                outcome,
                reason,
                predicted,
                confidence: real(6)?,
                set_cardinality,
                distance: opt(4)?,
                tau: opt(5)?,
                entropy: real(8)?,
            },
        ));
    }
    Ok(out)
}

pub fn load_decisions(path: impl AsRef<Path>) -> Result<Vec<(String, TriageDecision)>> {
    read_decisions(File::open(path)?)
}

/// Reads the config JSON from a `# dualveto` provenance line, if present.
pub fn read_provenance(path: impl AsRef<Path>) -> Result<Option<String>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    Ok(first.strip_prefix("# dualveto ").map(|s| s.trim_end().to_string()))
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "alpha",
    "inertia_threshold",
    "percentile",
    "k_0",
    "k_1",
    "coverage",
    "clear_f2",
    "tpdr",
    "risk_kappa",
    "status",
];

/// Incremental sweep CSV writer; every row is flushed as it is written.
pub struct SweepWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> SweepWriter<W> {
    pub fn new(mut w: W, config: &PipelineConfig) -> Result<Self> {
        write_provenance(&mut w, &config.to_json())?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
        out.flush()?;
        Ok(SweepWriter { out })
    }

    pub fn write(&mut self, r: &SweepRow) -> Result<()> {
        let k = |c: usize| r.k.map(|k| k[c].to_string()).unwrap_or_default();
        self.out
            .write_record([
                format_real(r.alpha),
                format_real(r.inertia_threshold),
                format_real(r.percentile),
                k(0),
                k(1),
                opt_real(r.coverage),
                opt_real(r.clear_f2),
                opt_real(r.tpdr),
                opt_real(r.risk_kappa),
                r.status.clone(),
            ])
            .map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_ablation<W: Write>(rows: &[(PolicyKind, MetricsReport)], config: &PipelineConfig, mut w: W) -> Result<()> {
    write_provenance(&mut w, &config.to_json())?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["policy".to_string(), "name".to_string()];
    for m in ["coverage", "clear_f2", "risk_kappa"] {
        header.extend([m.to_string(), format!("{m}_low"), format!("{m}_high")]);
    }
    out.write_record(&header).map_err(csv_err)?;
    for (kind, rep) in rows {
        let mut rec = vec![kind.as_str().to_string(), kind.display_name().to_string()];
        for e in [&rep.coverage, &rep.clear_f2, &rep.risk_kappa] {
            rec.extend([opt_real(e.point), opt_real(e.low), opt_real(e.high)]);
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_scenarios<W: Write>(rows: &[ScenarioRow], config_json: &str, mut w: W) -> Result<()> {
    write_provenance(&mut w, config_json)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "scenario", "name", "w_fn", "w_fp", "w_def_tn", "w_def_tp", "risk_kappa", "low", "high", "status",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let (a, b, c, d) = r.preset.weights();
        out.write_record([
            r.preset.as_str().to_string(),
            r.preset.display_name().to_string(),
            format_real(a),
            format_real(b),
            format_real(c),
            format_real(d),
            opt_real(r.kappa),
            opt_real(r.low),
            opt_real(r.high),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Aligned text rendering of scenario rows.
pub fn render_scenarios(rows: &[ScenarioRow]) -> String {
    let mut s = format!("{:<26} {:>10} {:>20}\n", "Scenario", "Risk-Kappa", "95% CI");
    for r in rows {
        let k = r.kappa.map_or_else(|| "n/a".into(), |k| format!("{k:.3}"));
        let ci = match (r.low, r.high) {
            (Some(l), Some(h)) => format!("[{l:.3}, {h:.3}]"),
            _ => String::new(),
        };
        s.push_str(&format!("{:<26} {k:>10} {ci:>20}\n", r.preset.display_name()));
    }
    s
}
