//! Sample manifests, class-count tables and prediction tensors, plus their
//! CSV wire formats.
//!
//! | file              | header                                          |
//! |-------------------|-------------------------------------------------|
//! | `manifest.csv`    | `sample_id,group_id,label,diagnosis,dataset`    |
//! | `predictions.csv` | `model_id,sample_id,crop_index,p_0,...,p_{C-1}` |
//! | `counts.csv`      | `class_index,count`                             |
//!
//! The `diagnosis` and `dataset` manifest columns may be omitted; they default
//! to `unknown` and `primary`. Probabilities are written with 9 significant
//! digits and rows are never silently re-normalized.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis};
use thiserror::Error;

use crate::csvio::{self, Header};

/// Largest accepted deviation of a probability row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv near line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("missing header row")]
    MissingHeader,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: invalid value {value:?} in column `{column}`")]
    InvalidValue {
        line: u64,
        column: String,
        value: String,
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("sample `{sample_id}` has label {label}, but only {classes} classes are declared")]
    LabelOutOfRange {
        sample_id: String,
        label: usize,
        classes: usize,
    },
    #[error("no samples match the selection")]
    EmptySelection,
    #[error("line {line}: probabilities sum to {sum}, not 1")]
    RowNotStochastic { line: u64, sum: f64 },
    #[error("line {line}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { line: u64, value: f64 },
    #[error("unknown sample id `{0}`")]
    UnknownSampleId(String),
    #[error("ragged crops: `{sample_id}` of model `{model_id}` has {found} crops, expected {expected}")]
    RaggedCrops {
        model_id: String,
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("model `{model_id}` is missing crop {crop} of sample `{sample_id}`")]
    MissingCell {
        model_id: String,
        sample_id: String,
        crop: usize,
    },
    #[error("model `{model_id}` has no predictions for sample `{sample_id}`")]
    MissingSample { model_id: String, sample_id: String },
    #[error("duplicate row for model `{model_id}`, sample `{sample_id}`, crop {crop}")]
    DuplicateRow {
        model_id: String,
        sample_id: String,
        crop: usize,
    },
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("unknown model id `{0}`")]
    UnknownModelId(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("table is empty")]
    EmptyTable,
}

impl IngestError {
    pub(crate) fn from_csv(err: csv::Error) -> Self {
        let line = err.position().map_or(0, csv::Position::line);
        match err.into_kind() {
            csv::ErrorKind::Io(source) => Self::from_io(source),
            other => Self::Csv {
                line,
                message: format!("{other:?}"),
            },
        }
    }

    pub(crate) fn from_io(source: std::io::Error) -> Self {
        Self::Io {
            path: "<stream>".into(),
            source,
        }
    }

    pub(crate) fn at_path(self, path: &Path) -> Self {
        match self {
            Self::Io { source, .. } => Self::Io {
                path: path.display().to_string(),
                source,
            },
            other => other,
        }
    }
}

/// How a lesion was diagnosed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnosis {
    Consensus,
    SerialImaging,
    Confocal,
    Histopathology,
    Unknown,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 5] = [
        Diagnosis::Consensus,
        Diagnosis::SerialImaging,
        Diagnosis::Confocal,
        Diagnosis::Histopathology,
        Diagnosis::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Consensus => "consensus",
            Diagnosis::SerialImaging => "serial_imaging",
            Diagnosis::Confocal => "confocal",
            Diagnosis::Histopathology => "histopathology",
            Diagnosis::Unknown => "unknown",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Diagnosis {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Diagnosis::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or(())
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which dataset a sample came from. Only primary samples are cross-validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetTag {
    Primary,
    Secondary,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Primary => "primary",
            DatasetTag::Secondary => "secondary",
        }
    }
}

impl FromStr for DatasetTag {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "primary" => Ok(DatasetTag::Primary),
            "secondary" => Ok(DatasetTag::Secondary),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    /// Lesion the image belongs to; all images of a lesion share a fold.
    pub group_id: String,
    pub label: usize,
    pub diagnosis: Diagnosis,
    pub dataset: DatasetTag,
}

impl Sample {
    pub fn new(sample_id: impl Into<String>, group_id: impl Into<String>, label: usize) -> Self {
        Self {
            sample_id: sample_id.into(),
            group_id: group_id.into(),
            label,
            diagnosis: Diagnosis::Unknown,
            dataset: DatasetTag::Primary,
        }
    }

    pub fn with_diagnosis(mut self, diagnosis: Diagnosis) -> Self {
        self.diagnosis = diagnosis;
        self
    }

    pub fn with_dataset(mut self, dataset: DatasetTag) -> Self {
        self.dataset = dataset;
        self
    }
}

/// Validated list of samples with a declared class count.
#[derive(Debug, Clone)]
pub struct SampleManifest {
    samples: Vec<Sample>,
    class_count: usize,
    position: HashMap<String, usize>,
}

impl SampleManifest {
    pub fn new(samples: Vec<Sample>, class_count: usize) -> Result<Self, IngestError> {
        let mut position = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.label >= class_count {
                return Err(IngestError::LabelOutOfRange {
                    sample_id: s.sample_id.clone(),
                    label: s.label,
                    classes: class_count,
                });
            }
            if position.insert(s.sample_id.clone(), i).is_some() {
                return Err(IngestError::DuplicateSampleId(s.sample_id.clone()));
            }
        }
        Ok(Self {
            samples,
            class_count,
            position,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.position.get(sample_id).copied()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn group_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.group_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Manifest restricted to `ids`, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, IngestError> {
        let samples = ids
            .iter()
            .map(|id| {
                self.position(id.as_ref())
                    .map(|i| self.samples[i].clone())
                    .ok_or_else(|| IngestError::UnknownSampleId(id.as_ref().to_owned()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(samples, self.class_count)
    }
}

pub fn read_manifest<R: Read>(input: R, class_count: usize) -> Result<SampleManifest, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let id_col = header.require("sample_id")?;
    let group_col = header.require("group_id")?;
    let label_col = header.require("label")?;
    let diag_col = header.find("diagnosis");
    let data_col = header.find("dataset");

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let line = csvio::line_of(&record);
        let invalid = |column: &str, value: &str| IngestError::InvalidValue {
            line,
            column: column.to_owned(),
            value: value.to_owned(),
        };
        let sample_id = csvio::field(&record, id_col, "sample_id")?;
        if sample_id.is_empty() {
            return Err(invalid("sample_id", sample_id));
        }
        let group_id = csvio::field(&record, group_col, "group_id")?;
        if group_id.is_empty() {
            return Err(invalid("group_id", group_id));
        }
        let label: usize = csvio::parse_field(&record, label_col, "label")?;
        let diagnosis = match diag_col.map(|c| csvio::field(&record, c, "diagnosis")) {
            None => Diagnosis::Unknown,
            Some(raw) => match raw? {
                "" => Diagnosis::Unknown,
                v => v.parse().map_err(|_| invalid("diagnosis", v))?,
            },
        };
        let dataset = match data_col.map(|c| csvio::field(&record, c, "dataset")) {
            None => DatasetTag::Primary,
            Some(raw) => match raw? {
                "" => DatasetTag::Primary,
                v => v.parse().map_err(|_| invalid("dataset", v))?,
            },
        };
        samples.push(Sample {
            sample_id: sample_id.to_owned(),
            group_id: group_id.to_owned(),
            label,
            diagnosis,
            dataset,
        });
    }
    SampleManifest::new(samples, class_count)
}

pub fn load_manifest(path: &Path, class_count: usize) -> Result<SampleManifest, IngestError> {
    read_manifest(csvio::open(path)?, class_count).map_err(|e| e.at_path(path))
}

pub fn write_manifest<W: Write>(manifest: &SampleManifest, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["sample_id", "group_id", "label", "diagnosis", "dataset"])?;
    for s in manifest.samples() {
        csvio::write_row(
            &mut wtr,
            [
                s.sample_id.as_str(),
                s.group_id.as_str(),
                &s.label.to_string(),
                s.diagnosis.as_str(),
                s.dataset.as_str(),
            ],
        )?;
    }
    csvio::finish(wtr)
}

pub fn save_manifest(path: &Path, manifest: &SampleManifest) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_manifest(manifest, w))
}

/// Per-class sample counts `n_i` with total `N` and class count `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    counts: Vec<u64>,
}

impl ClassCounts {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }
}

/// Counts labels, optionally restricted to one dataset.
///
/// ```
/// use imbalkit::ingest::{class_counts, Sample, SampleManifest};
/// let m = SampleManifest::new(
///     vec![Sample::new("a", "g1", 0), Sample::new("b", "g1", 0),
///          Sample::new("c", "g2", 1), Sample::new("d", "g3", 2)],
///     3,
/// ).unwrap();
/// assert_eq!(class_counts(&m, None).unwrap().counts(), &[2, 1, 1]);
/// ```
pub fn class_counts(
    manifest: &SampleManifest,
    dataset_filter: Option<DatasetTag>,
) -> Result<ClassCounts, IngestError> {
    let mut counts = vec![0u64; manifest.class_count()];
    let mut seen = false;
    for s in manifest.samples() {
        if dataset_filter.map_or(true, |d| d == s.dataset) {
            counts[s.label] += 1;
            seen = true;
        }
    }
    if !seen {
        return Err(IngestError::EmptySelection);
    }
    Ok(ClassCounts::new(counts))
}

pub fn read_counts<R: Read>(input: R) -> Result<ClassCounts, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let idx_col = header.require("class_index")?;
    let count_col = header.require("count")?;
    let mut rows: Vec<(usize, u64, u64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let class: usize = csvio::parse_field(&record, idx_col, "class_index")?;
        let count: u64 = csvio::parse_field(&record, count_col, "count")?;
        rows.push((class, count, csvio::line_of(&record)));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    rows.sort_by_key(|r| r.0);
    let mut counts = Vec::with_capacity(rows.len());
    for (expected, (class, count, line)) in rows.into_iter().enumerate() {
        if class != expected {
            return Err(IngestError::InvalidValue {
                line,
                column: "class_index".into(),
                value: class.to_string(),
            });
        }
        counts.push(count);
    }
    Ok(ClassCounts::new(counts))
}

pub fn load_counts(path: &Path) -> Result<ClassCounts, IngestError> {
    read_counts(csvio::open(path)?).map_err(|e| e.at_path(path))
}

pub fn write_counts<W: Write>(counts: &ClassCounts, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["class_index", "count"])?;
    for (i, n) in counts.counts().iter().enumerate() {
        csvio::write_row(&mut wtr, [i.to_string(), n.to_string()])?;
    }
    csvio::finish(wtr)
}

pub fn save_counts(path: &Path, counts: &ClassCounts) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_counts(counts, w))
}

/// Probabilities indexed `(model, sample, crop, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    model_ids: Vec<String>,
    sample_ids: Vec<String>,
    values: Array4<f64>,
}

impl PredictionTensor {
    /// Builds a tensor, checking that every `(model, sample, crop)` row is a
    /// probability distribution.
    pub fn new(
        model_ids: Vec<String>,
        sample_ids: Vec<String>,
        values: Array4<f64>,
    ) -> Result<Self, IngestError> {
        let (m, s, _, c) = values.dim();
        if model_ids.len() != m || sample_ids.len() != s {
            return Err(IngestError::ShapeMismatch(format!(
                "{} model ids and {} sample ids for a tensor of {m} models and {s} samples",
                model_ids.len(),
                sample_ids.len()
            )));
        }
        if c == 0 {
            return Err(IngestError::EmptyTable);
        }
        for row in values.lanes(Axis(3)) {
            check_row(row.iter().copied(), 0)?;
        }
        Ok(Self {
            model_ids,
            sample_ids,
            values,
        })
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn model_count(&self) -> usize {
        self.values.dim().0
    }

    pub fn sample_count(&self) -> usize {
        self.values.dim().1
    }

    pub fn crop_count(&self) -> usize {
        self.values.dim().2
    }

    pub fn class_count(&self) -> usize {
        self.values.dim().3
    }

    /// `(sample, crop, class)` block of one model.
    pub fn model(&self, m: usize) -> ArrayView3<'_, f64> {
        self.values.index_axis(Axis(0), m)
    }

    /// `(crop, class)` matrix of one model and sample.
    pub fn crops(&self, m: usize, s: usize) -> ArrayView2<'_, f64> {
        self.values
            .index_axis(Axis(0), m)
            .index_axis_move(Axis(0), s)
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == id)
    }

    /// Tensor restricted to the listed models, in the listed order.
    pub fn select_models<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, IngestError> {
        let idx = ids
            .iter()
            .map(|id| {
                self.model_index(id.as_ref())
                    .ok_or_else(|| IngestError::UnknownModelId(id.as_ref().to_owned()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model_ids: ids.iter().map(|s| s.as_ref().to_owned()).collect(),
            sample_ids: self.sample_ids.clone(),
            values: self.values.select(Axis(0), &idx),
        })
    }

    /// Crop-averaged predictions, `(model, sample, class)`.
    pub fn crop_mean(&self) -> Array3<f64> {
        self.values
            .mean_axis(Axis(2))
            .expect("tensor always has at least one crop")
    }
}

fn check_row(row: impl Iterator<Item = f64>, line: u64) -> Result<(), IngestError> {
    let mut sum = 0.0;
    for v in row {
        if !(0.0..=1.0).contains(&v) {
            return Err(IngestError::ProbabilityOutOfRange { line, value: v });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(IngestError::RowNotStochastic { line, sum });
    }
    Ok(())
}

/// Reads `predictions.csv`; the sample axis follows manifest order and every
/// manifest sample must be present for every model.
pub fn read_predictions<R: Read>(
    input: R,
    manifest: &SampleManifest,
) -> Result<PredictionTensor, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let model_col = header.require("model_id")?;
    let sample_col = header.require("sample_id")?;
    let crop_col = header.require("crop_index")?;
    let prob_cols = header.numbered("p_");
    if prob_cols.is_empty() {
        return Err(IngestError::MissingColumn("p_0".into()));
    }
    let classes = prob_cols.len();
    if classes != manifest.class_count() {
        return Err(IngestError::ClassCountMismatch {
            expected: manifest.class_count(),
            found: classes,
        });
    }

    let mut model_ids: Vec<String> = Vec::new();
    let mut model_pos: HashMap<String, usize> = HashMap::new();
    // per model: per sample: crop -> row
    let mut cells: Vec<Vec<HashMap<usize, Vec<f64>>>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let line = csvio::line_of(&record);
        let model_id = csvio::field(&record, model_col, "model_id")?;
        let sample_id = csvio::field(&record, sample_col, "sample_id")?;
        let crop: usize = csvio::parse_field(&record, crop_col, "crop_index")?;
        let s = manifest
            .position(sample_id)
            .ok_or_else(|| IngestError::UnknownSampleId(sample_id.to_owned()))?;
        let probs = prob_cols
            .iter()
            .enumerate()
            .map(|(c, &col)| csvio::parse_f64(&record, col, &format!("p_{c}")))
            .collect::<Result<Vec<_>, _>>()?;
        check_row(probs.iter().copied(), line)?;
        let m = *model_pos.entry(model_id.to_owned()).or_insert_with(|| {
            model_ids.push(model_id.to_owned());
            cells.push(vec![HashMap::new(); manifest.len()]);
            model_ids.len() - 1
        });
        if cells[m][s].insert(crop, probs).is_some() {
            return Err(IngestError::DuplicateRow {
                model_id: model_id.to_owned(),
                sample_id: sample_id.to_owned(),
                crop,
            });
        }
    }
    if model_ids.is_empty() || manifest.is_empty() {
        return Err(IngestError::EmptyTable);
    }

    let crops = cells[0]
        .iter()
        .map(HashMap::len)
        .find(|&n| n > 0)
        .unwrap_or(0);
    let sample_ids: Vec<String> = manifest
        .samples()
        .iter()
        .map(|s| s.sample_id.clone())
        .collect();
    let mut values = Array4::<f64>::zeros((model_ids.len(), manifest.len(), crops, classes));
    for (m, per_sample) in cells.iter().enumerate() {
        for (s, per_crop) in per_sample.iter().enumerate() {
            if per_crop.is_empty() {
                return Err(IngestError::MissingSample {
                    model_id: model_ids[m].clone(),
                    sample_id: sample_ids[s].clone(),
                });
            }
            if per_crop.len() != crops {
                return Err(IngestError::RaggedCrops {
                    model_id: model_ids[m].clone(),
                    sample_id: sample_ids[s].clone(),
                    expected: crops,
                    found: per_crop.len(),
                });
            }
            for r in 0..crops {
                let row = per_crop.get(&r).ok_or_else(|| IngestError::MissingCell {
                    model_id: model_ids[m].clone(),
                    sample_id: sample_ids[s].clone(),
                    crop: r,
                })?;
                for (c, &p) in row.iter().enumerate() {
                    values[[m, s, r, c]] = p;
                }
            }
        }
    }
    Ok(PredictionTensor {
        model_ids,
        sample_ids,
        values,
    })
}

pub fn load_predictions(
    path: &Path,
    manifest: &SampleManifest,
) -> Result<PredictionTensor, IngestError> {
    read_predictions(csvio::open(path)?, manifest).map_err(|e| e.at_path(path))
}

pub fn write_predictions<W: Write>(
    tensor: &PredictionTensor,
    output: W,
) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    let mut header = vec!["model_id".to_owned(), "sample_id".into(), "crop_index".into()];
    header.extend((0..tensor.class_count()).map(|c| format!("p_{c}")));
    csvio::write_row(&mut wtr, &header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (m, model_id) in tensor.model_ids().iter().enumerate() {
        for (s, sample_id) in tensor.sample_ids().iter().enumerate() {
            for (r, probs) in tensor.crops(m, s).outer_iter().enumerate() {
                row.clear();
                row.push(model_id.clone());
                row.push(sample_id.clone());
                row.push(r.to_string());
                row.extend(probs.iter().map(|&p| csvio::format_sig9(p)));
                csvio::write_row(&mut wtr, &row)?;
            }
        }
    }
    csvio::finish(wtr)
}

pub fn save_predictions(path: &Path, tensor: &PredictionTensor) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_predictions(tensor, w))
}
