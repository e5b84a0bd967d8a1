//! Cohort files: parsing, validation and ensemble member aggregation.
//!
//! A cohort is a header-labelled CSV with one row per `(id, member_id)`:
//!
//! ```text
//! id,split,label,member_id,logit_0,logit_1,e_0,e_1,...,e_{d-1}
//! p1,val,1,0,-0.3,0.8,0.12,...
//! ```
//!
//! `split` is `train`, `val` or `test`, optionally fold-suffixed
//! (`val:3`). Folds are pooled by every consumer. An empty `label`
//! marks an unlabelled record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{entropy, softmax2};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value in row {row}, column `{column}`")]
    NonFiniteValue { row: usize, column: String },
    #[error("cannot parse row {row}, column `{column}`: `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("inconsistent dimension: {0}")]
    InconsistentDimension(String),
    #[error("duplicate key (id `{id}`, member {member_id})")]
    DuplicateKey { id: String, member_id: u32 },
    #[error("id `{id}` has member set {found:?}, expected {expected:?}")]
    InconsistentMembers {
        id: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },
    #[error("id `{id}` disagrees across members on `{field}`")]
    ConflictingRecord { id: String, field: &'static str },
    #[error("split `{0}` has no usable records")]
    EmptySplit(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("expected {expected} temperatures (one per member), got {got}")]
    TemperatureCount { expected: usize, got: usize },
    #[error("temperature for member {member_id} must be positive and finite, got {value}")]
    InvalidTemperature { member_id: u32, value: f64 },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

/// A split tag with an optional cross-validation fold suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Split {
    pub kind: SplitKind,
    pub fold: Option<u32>,
}

impl Split {
    pub const fn new(kind: SplitKind) -> Self {
        Split { kind, fold: None }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fold {
            Some(k) => write!(f, "{}:{}", self.kind.as_str(), k),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (head, fold) = match s.split_once(':') {
            Some((h, f)) => (h, Some(f.parse::<u32>().map_err(|_| s.to_string())?)),
            None => (s, None),
        };
        let kind = match head {
            "train" => SplitKind::Train,
            "val" => SplitKind::Val,
            "test" => SplitKind::Test,
            _ => return Err(s.to_string()),
        };
        Ok(Split { kind, fold })
    }
}

/// One row of a cohort file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub split: Split,
    pub label: Option<u8>,
    pub member_id: u32,
    pub logits: [f64; 2],
    pub embedding: Vec<f64>,
}

/// The output of a single ensemble member (or MC pass) for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutput {
    pub member_id: u32,
    pub logits: [f64; 2],
    pub embedding: Vec<f64>,
}

/// All member rows for one id, sorted by `member_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub split: Split,
    pub label: Option<u8>,
    pub members: Vec<MemberOutput>,
}

impl Patient {
    /// Embedding of the lowest member id.
    pub fn reference_embedding(&self) -> &[f64] {
        &self.members[0].embedding
    }

    /// Mean of per-member tempered softmax outputs. `temperatures` is
    /// aligned with `members`.
    pub fn aggregate(&self, temperatures: &[f64]) -> Aggregate {
        debug_assert_eq!(temperatures.len(), self.members.len());
        let k = self.members.len() as f64;
        let mut p = [0.0f64; 2];
        for (m, &t) in self.members.iter().zip(temperatures) {
            let q = softmax2(m.logits, t);
            p[0] += q[0];
            p[1] += q[1];
        }
        let probs = [p[0] / k, p[1] / k];
        Aggregate {
            probs,
            entropy: entropy(&probs),
        }
    }
}

/// Aggregated calibrated probability for one id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub probs: [f64; 2],
    pub entropy: f64,
}

/// Column naming for cohort files. Overridable from the JSON run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub split: String,
    pub label: String,
    pub member_id: String,
    pub logit_prefix: String,
    pub embedding_prefix: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: "id".into(),
            split: "split".into(),
            label: "label".into(),
            member_id: "member_id".into(),
            logit_prefix: "logit_".into(),
            embedding_prefix: "e_".into(),
        }
    }
}

/// A validated cohort: patients sorted by id, each with the same member set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    dim: usize,
    member_ids: Vec<u32>,
    patients: Vec<Patient>,
}

impl Cohort {
    /// Builds a cohort from loose records, enforcing every file invariant.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let dim = match records.first() {
            Some(r) => r.embedding.len(),
            None => return Err(DatasetError::EmptySplit("all".into())),
        };
        if dim < 2 {
            return Err(DatasetError::InconsistentDimension(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        let mut grouped: BTreeMap<String, Vec<Record>> = BTreeMap::new();
        for (i, r) in records.into_iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(DatasetError::InconsistentDimension(format!(
                    "row {} has {} embedding entries, expected {dim}",
                    i + 1,
                    r.embedding.len()
                )));
            }
            if let Some(l) = r.label {
                if l > 1 {
                    return Err(DatasetError::Parse {
                        row: i + 1,
                        column: "label".into(),
                        value: l.to_string(),
                    });
                }
            }
            let finite = r.logits.iter().chain(&r.embedding).all(|v| v.is_finite());
            if !finite {
                return Err(DatasetError::NonFiniteValue {
                    row: i + 1,
                    column: "logits/embedding".into(),
                });
            }
            grouped.entry(r.id.clone()).or_default().push(r);
        }

        let mut member_ids: Option<Vec<u32>> = None;
        let mut patients = Vec::with_capacity(grouped.len());
        for (id, mut rows) in grouped {
            rows.sort_by_key(|r| r.member_id);
            for pair in rows.windows(2) {
                if pair[0].member_id == pair[1].member_id {
                    return Err(DatasetError::DuplicateKey {
                        id,
                        member_id: pair[0].member_id,
                    });
                }
            }
            let ids: Vec<u32> = rows.iter().map(|r| r.member_id).collect();
            match &member_ids {
                None => member_ids = Some(ids),
                Some(expected) if *expected != ids => {
                    return Err(DatasetError::InconsistentMembers {
                        id,
                        expected: expected.clone(),
                        found: ids,
                    })
                }
                Some(_) => {}
            }
            let split = rows[0].split;
            let label = rows[0].label;
            if rows.iter().any(|r| r.split != split) {
                return Err(DatasetError::ConflictingRecord { id, field: "split" });
            }
            if rows.iter().any(|r| r.label != label) {
                return Err(DatasetError::ConflictingRecord { id, field: "label" });
            }
            let members = rows
                .into_iter()
                .map(|r| MemberOutput {
                    member_id: r.member_id,
                    logits: r.logits,
                    embedding: r.embedding,
                })
                .collect();
            patients.push(Patient {
                id,
                split,
                label,
                members,
            });
        }

        Ok(Cohort {
            dim,
            member_ids: member_ids.unwrap_or_default(),
            patients,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted member ids shared by every patient.
    pub fn member_ids(&self) -> &[u32] {
        &self.member_ids
    }

    pub fn member_count(&self) -> usize {
        self.member_ids.len()
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: &str) -> Result<&Patient> {
        self.patients
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .map(|i| &self.patients[i])
            .map_err(|_| DatasetError::UnknownId(id.to_string()))
    }

    /// Patients of one split kind, folds pooled, in id order.
    pub fn split(&self, kind: SplitKind) -> impl Iterator<Item = &Patient> {
        self.patients.iter().filter(move |p| p.split.kind == kind)
    }

    /// Labelled patients of one split kind.
    pub fn labeled(&self, kind: SplitKind) -> impl Iterator<Item = (&Patient, u8)> {
        self.split(kind).filter_map(|p| p.label.map(|l| (p, l)))
    }

    /// Fraction of labelled patients in each class, if any are labelled.
    pub fn class_priors(&self) -> Option<[f64; 2]> {
        let mut counts = [0usize; 2];
        for p in &self.patients {
            if let Some(l) = p.label {
                counts[l as usize] += 1;
            }
        }
        let n = counts[0] + counts[1];
        (n > 0).then(|| [counts[0] as f64 / n as f64, counts[1] as f64 / n as f64])
    }

    /// Embedding of the lowest member id for `id`.
    pub fn reference_embedding(&self, id: &str) -> Result<&[f64]> {
        Ok(self.patient(id)?.reference_embedding())
    }

    /// Per-patient aggregated probabilities, aligned with [`Cohort::patients`].
    pub fn aggregate_members(&self, temperatures: &[f64]) -> Result<Vec<Aggregate>> {
        self.check_temperatures(temperatures)?;
        Ok(self
            .patients
            .iter()
            .map(|p| p.aggregate(temperatures))
            .collect())
    }

    pub(crate) fn check_temperatures(&self, temperatures: &[f64]) -> Result<()> {
        if temperatures.len() != self.member_ids.len() {
            return Err(DatasetError::TemperatureCount {
                expected: self.member_ids.len(),
                got: temperatures.len(),
            });
        }
        for (&member_id, &t) in self.member_ids.iter().zip(temperatures) {
            if !(t.is_finite() && t > 0.0) {
                return Err(DatasetError::InvalidTemperature { member_id, value: t });
            }
        }
        Ok(())
    }

    /// Flattened rows in `(id, member_id)` order.
    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.patients.iter().flat_map(|p| {
            p.members.iter().map(move |m| Record {
                id: p.id.clone(),
                split: p.split,
                label: p.label,
                member_id: m.member_id,
                logits: m.logits,
                embedding: m.embedding.clone(),
            })
        })
    }
}

/// Loads and validates a cohort CSV.
pub fn load_cohort(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Cohort> {
    read_cohort(File::open(path)?, columns)
}

pub fn read_cohort<R: Read>(reader: R, columns: &ColumnMap) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Csv(e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = find(&columns.id)?;
    let split_col = find(&columns.split)?;
    let label_col = find(&columns.label)?;
    let member_col = find(&columns.member_id)?;
    let logit_cols = [
        find(&format!("{}0", columns.logit_prefix))?,
        find(&format!("{}1", columns.logit_prefix))?,
    ];

    let mut emb_index: BTreeMap<usize, usize> = BTreeMap::new();
    for (col, h) in headers.iter().enumerate() {
        if let Some(rest) = h.trim().strip_prefix(columns.embedding_prefix.as_str()) {
            if let Ok(k) = rest.parse::<usize>() {
                emb_index.insert(k, col);
            }
        }
    }
    let dim = emb_index.len();
    let emb_cols: Vec<usize> = (0..dim)
        .map(|k| {
            emb_index
                .get(&k)
                .copied()
                .ok_or_else(|| DatasetError::MissingColumn(format!("{}{k}", columns.embedding_prefix)))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                DatasetError::InconsistentDimension(format!("row {row_no} is ragged"))
            }
            _ => DatasetError::Csv(e.to_string()),
        })?;
        let field = |col: usize| row.get(col).unwrap_or("").trim();
        let parse_err = |col: usize| DatasetError::Parse {
            row: row_no,
            column: headers[col].to_string(),
            value: field(col).to_string(),
        };
        let real = |col: usize| -> Result<f64> {
            let v: f64 = field(col).parse().map_err(|_| parse_err(col))?;
            if !v.is_finite() {
                return Err(DatasetError::NonFiniteValue {
                    row: row_no,
                    column: headers[col].to_string(),
                });
            }
            Ok(v)
        };

        let split: Split = field(split_col).parse().map_err(|_| parse_err(split_col))?;
        let label = match field(label_col) {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(parse_err(label_col)),
        };
        let member_id: u32 = field(member_col).parse().map_err(|_| parse_err(member_col))?;
        let logits = [real(logit_cols[0])?, real(logit_cols[1])?];
        let embedding = emb_cols.iter().map(|&c| real(c)).collect::<Result<Vec<_>>>()?;
        records.push(Record {
            id: field(id_col).to_string(),
            split,
            label,
            member_id,
            logits,
            embedding,
        });
    }
    Cohort::from_records(records)
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>, columns: &ColumnMap) -> Result<()> {
    let file = File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_cohort(cohort, &mut w, columns)?;
    w.flush()?;
    Ok(())
}

/// Writes rows in `(id, member_id)` order with round-trip-exact numbers.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W, columns: &ColumnMap) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    let mut header = vec![
        columns.id.clone(),
        columns.split.clone(),
        columns.label.clone(),
        columns.member_id.clone(),
        format!("{}0", columns.logit_prefix),
        format!("{}1", columns.logit_prefix),
    ];
    header.extend((0..cohort.dim()).map(|k| format!("{}{k}", columns.embedding_prefix)));
    w.write_record(&header).map_err(|e| DatasetError::Csv(e.to_string()))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in cohort.records() {
        row.clear();
        row.push(r.id);
        row.push(r.split.to_string());
        row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        row.push(r.member_id.to_string());
        row.extend(r.logits.iter().chain(&r.embedding).map(|&v| format_real(v)));
        w.write_record(&row).map_err(|e| DatasetError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal text that parses back to the identical `f64`.
pub fn format_real(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
