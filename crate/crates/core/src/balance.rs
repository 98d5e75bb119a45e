//! Class-imbalance countermeasures: inverse-frequency loss weights,
//! diagnosis-type loss factors and class-balanced batch sampling.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::csvio::{self, Header};
use crate::ingest::{ClassCounts, Diagnosis, IngestError, SampleManifest};

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("class {0} has no samples; inverse-frequency weights are undefined")]
    ZeroClassCount(usize),
    #[error("batch size {batch_size} cannot hold one sample of each of {classes} classes")]
    BatchTooSmall { batch_size: usize, classes: usize },
    #[error("class {0} has no samples to draw from")]
    EmptyClass(usize),
    #[error("diagnosis factor for {diagnosis} must be positive, got {factor}")]
    NonPositiveFactor { diagnosis: Diagnosis, factor: f64 },
    #[error("unknown weighting mode `{0}`")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    None,
    /// `w_i = N / n_i`
    InverseFreq,
    /// `w_i = N / (c * n_i)`
    InverseFreqOverC,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::None => "none",
            WeightMode::InverseFreq => "invfreq",
            WeightMode::InverseFreqOverC => "invfreq-c",
        }
    }
}

impl FromStr for WeightMode {
    type Err = BalanceError;

    fn from_str(s: &str) -> Result<Self, BalanceError> {
        match s {
            "none" => Ok(WeightMode::None),
            "invfreq" => Ok(WeightMode::InverseFreq),
            "invfreq-c" => Ok(WeightMode::InverseFreqOverC),
            other => Err(BalanceError::UnknownMode(other.to_owned())),
        }
    }
}

/// Per-class positive loss multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
    mode: WeightMode,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            mode: WeightMode::None,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn class_count(&self) -> usize {
        self.weights.len()
    }
}

/// Loss weights from class counts.
///
/// ```
/// use imbalkit::balance::{class_weights, WeightMode};
/// use imbalkit::ingest::ClassCounts;
/// let ham = ClassCounts::new(vec![1113, 6705, 514, 327, 1099, 115, 142]);
/// let w = class_weights(&ham, WeightMode::InverseFreq).unwrap();
/// assert!((w.weights()[5] - 10015.0 / 115.0).abs() < 1e-12);
/// ```
pub fn class_weights(counts: &ClassCounts, mode: WeightMode) -> Result<ClassWeights, BalanceError> {
    let c = counts.class_count();
    if mode == WeightMode::None {
        return Ok(ClassWeights::uniform(c));
    }
    if let Some(zero) = counts.counts().iter().position(|&n| n == 0) {
        return Err(BalanceError::ZeroClassCount(zero));
    }
    let total = counts.total() as f64;
    let scale = match mode {
        WeightMode::InverseFreqOverC => c as f64,
        _ => 1.0,
    };
    let weights = counts
        .counts()
        .iter()
        .map(|&n| total / (scale * n as f64))
        .collect();
    Ok(ClassWeights { weights, mode })
}

/// Weights for training on primary plus secondary data. Only the primary
/// dataset's counts are used, so a secondary dataset that is even more skewed
/// cannot inflate minority-class weights.
pub fn combined_dataset_weights(
    primary_counts: &ClassCounts,
    mode: WeightMode,
) -> Result<ClassWeights, BalanceError> {
    class_weights(primary_counts, mode)
}

pub fn write_weights<W: Write>(weights: &ClassWeights, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["class_index", "weight"])?;
    for (i, w) in weights.weights().iter().enumerate() {
        csvio::write_row(&mut wtr, [i.to_string(), csvio::format_sig9(*w)])?;
    }
    csvio::finish(wtr)
}

pub fn save_weights(path: &Path, weights: &ClassWeights) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_weights(weights, w))
}

/// Reads `weights.csv`. The mode is not stored in the file, so the result is
/// tagged with the caller's `mode`.
pub fn read_weights<R: Read>(input: R, mode: WeightMode) -> Result<ClassWeights, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let idx_col = header.require("class_index")?;
    let w_col = header.require("weight")?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let i: usize = csvio::parse_field(&record, idx_col, "class_index")?;
        let w = csvio::parse_f64(&record, w_col, "weight")?;
        if w <= 0.0 {
            return Err(IngestError::InvalidValue {
                line: csvio::line_of(&record),
                column: "weight".into(),
                value: w.to_string(),
            });
        }
        rows.push((i, w));
    }
    rows.sort_by_key(|r| r.0);
    if rows.is_empty() || rows.iter().enumerate().any(|(e, (i, _))| e != *i) {
        return Err(IngestError::InvalidValue {
            line: 0,
            column: "class_index".into(),
            value: "indices must be 0..C, each once".into(),
        });
    }
    Ok(ClassWeights {
        weights: rows.into_iter().map(|(_, w)| w).collect(),
        mode,
    })
}

/// Extra loss factor per diagnosis method. All factors default to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisWeights {
    factors: [f64; 5],
}

impl Default for DiagnosisWeights {
    fn default() -> Self {
        Self { factors: [1.0; 5] }
    }
}

impl DiagnosisWeights {
    pub fn new(factors: &[(Diagnosis, f64)]) -> Result<Self, BalanceError> {
        let mut dw = Self::default();
        for &(diagnosis, factor) in factors {
            dw.set(diagnosis, factor)?;
        }
        Ok(dw)
    }

    pub fn set(&mut self, diagnosis: Diagnosis, factor: f64) -> Result<(), BalanceError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(BalanceError::NonPositiveFactor { diagnosis, factor });
        }
        self.factors[diagnosis.index()] = factor;
        Ok(())
    }

    pub fn factor(&self, diagnosis: Diagnosis) -> f64 {
        self.factors[diagnosis.index()]
    }
}

#[inline]
pub fn sample_weight(label: usize, diagnosis: Diagnosis, cw: &ClassWeights, dw: &DiagnosisWeights) -> f64 {
    cw.weights[label] * dw.factor(diagnosis)
}

/// Endless stream of class-balanced batches over a label vector.
///
/// Each batch holds `batch_size / C` samples of every class, plus one more for
/// `batch_size % C` classes picked by a rotation that advances every batch from
/// a seeded start. Within a class, samples are drawn without replacement from
/// a shuffled pool which is reshuffled once exhausted, so minority classes are
/// oversampled.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
    rotation: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatches {
    pub fn new(
        labels: &[usize],
        classes: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, BalanceError> {
        if batch_size < classes {
            return Err(BalanceError::BatchTooSmall {
                batch_size,
                classes,
            });
        }
        let mut pools = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            pools[l].push(i);
        }
        if let Some(empty) = pools.iter().position(Vec::is_empty) {
            return Err(BalanceError::EmptyClass(empty));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
        let rotation = rng.gen_range(0..classes);
        Ok(Self {
            cursors: vec![0; classes],
            pools,
            batch_size,
            rotation,
            rng,
        })
    }

    fn draw(&mut self, class: usize) -> usize {
        if self.cursors[class] == self.pools[class].len() {
            self.pools[class].shuffle(&mut self.rng);
            self.cursors[class] = 0;
        }
        let idx = self.pools[class][self.cursors[class]];
        self.cursors[class] += 1;
        idx
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let classes = self.pools.len();
        let base = self.batch_size / classes;
        let extra = self.batch_size % classes;
        let mut batch = Vec::with_capacity(self.batch_size);
        for class in 0..classes {
            let bonus = (class + classes - self.rotation) % classes < extra;
            for _ in 0..base + usize::from(bonus) {
                batch.push(self.draw(class));
            }
        }
        self.rotation = (self.rotation + extra) % classes;
        batch.shuffle(&mut self.rng);
        Some(batch)
    }
}

/// `n_batches` balanced batches of manifest row indices.
pub fn balanced_batch_indices(
    manifest: &SampleManifest,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, BalanceError> {
    let labels = manifest.labels();
    Ok(BalancedBatches::new(&labels, manifest.class_count(), batch_size, seed)?
        .take(n_batches)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Sample;
    use proptest::prelude::*;

    const HAM: [u64; 7] = [1113, 6705, 514, 327, 1099, 115, 142];

    fn ham() -> ClassCounts {
        ClassCounts::new(HAM.to_vec())
    }

    #[test]
    fn ham_inverse_frequency() {
        let w = class_weights(&ham(), WeightMode::InverseFreq).unwrap();
        assert!((w.weights()[1] - 1.493661).abs() < 1e-5);
        assert!((w.weights()[5] - 87.086957).abs() < 1e-5);
        let wc = class_weights(&ham(), WeightMode::InverseFreqOverC).unwrap();
        assert!((wc.weights()[5] - 12.440994).abs() < 1e-5);
    }

    #[test]
    fn balanced_counts_give_unit_weights() {
        let w = class_weights(&ClassCounts::new(vec![10, 10, 10]), WeightMode::InverseFreqOverC)
            .unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0]);
        let none = class_weights(&ClassCounts::new(vec![0, 5]), WeightMode::None).unwrap();
        assert_eq!(none.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn combined_weights_ignore_secondary() {
        let primary = ClassCounts::new(vec![8, 2]);
        let w = combined_dataset_weights(&primary, WeightMode::InverseFreq).unwrap();
        assert_eq!(w.weights(), &[10.0 / 8.0, 10.0 / 2.0]);
        let uniform = ClassCounts::new(vec![4, 4]);
        let w = combined_dataset_weights(&uniform, WeightMode::InverseFreq).unwrap();
        assert_eq!(w.weights(), &[2.0, 2.0]);
        assert_eq!(
            combined_dataset_weights(&ClassCounts::new(vec![8, 0]), WeightMode::InverseFreq),
            Err(BalanceError::ZeroClassCount(1))
        );
    }

    #[test]
    fn sample_weights() {
        let ones = ClassWeights::uniform(3);
        let dw = DiagnosisWeights::default();
        for d in Diagnosis::ALL {
            assert_eq!(sample_weight(2, d, &ones, &dw), 1.0);
        }
        let cw = ClassWeights {
            weights: vec![1.0, 3.0],
            mode: WeightMode::InverseFreq,
        };
        let dw = DiagnosisWeights::new(&[(Diagnosis::Histopathology, 2.0)]).unwrap();
        assert_eq!(sample_weight(1, Diagnosis::Histopathology, &cw, &dw), 6.0);
        assert_eq!(sample_weight(1, Diagnosis::Consensus, &cw, &dw), 3.0);

        let inv = class_weights(&ham(), WeightMode::InverseFreq).unwrap();
        let df = sample_weight(5, Diagnosis::Unknown, &inv, &DiagnosisWeights::default());
        assert!((df - 87.08696).abs() < 1e-5);

        assert!(DiagnosisWeights::new(&[(Diagnosis::Confocal, 0.0)]).is_err());
    }

    #[test]
    fn weights_csv_roundtrip() {
        let w = class_weights(&ham(), WeightMode::InverseFreq).unwrap();
        let mut out = Vec::new();
        write_weights(&w, &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("class_index,weight\n0,8.99820305\n1,1.49366145\n"));
        let back = read_weights(out.as_slice(), WeightMode::InverseFreq).unwrap();
        for (a, b) in back.weights().iter().zip(w.weights()) {
            assert!((a - b).abs() / b < 1e-8);
        }
    }

    fn manifest_with(counts: &[usize]) -> SampleManifest {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let i = samples.len();
                samples.push(Sample::new(format!("s{i}"), format!("g{i}"), c));
            }
        }
        SampleManifest::new(samples, counts.len()).unwrap()
    }

    #[test]
    fn seven_classes_batch_forty() {
        let m = manifest_with(&[1113, 6705, 514, 327, 1099, 115, 142]);
        let batches = balanced_batch_indices(&m, 40, 200, 3).unwrap();
        assert_eq!(batches.len(), 200);
        let labels = m.labels();
        for b in &batches {
            let mut hist = [0usize; 7];
            for &i in b {
                hist[labels[i]] += 1;
            }
            let mut sorted = hist;
            sorted.sort_unstable();
            assert_eq!(sorted, [5, 5, 6, 6, 6, 6, 6]);
        }
    }

    #[test]
    fn minority_sample_is_oversampled() {
        let m = manifest_with(&[100, 1]);
        for b in balanced_batch_indices(&m, 4, 50, 9).unwrap() {
            assert_eq!(b.iter().filter(|&&i| i == 100).count(), 2);
        }
    }

    #[test]
    fn batch_errors() {
        let m = manifest_with(&[3; 7]);
        assert_eq!(
            balanced_batch_indices(&m, 3, 1, 0),
            Err(BalanceError::BatchTooSmall {
                batch_size: 3,
                classes: 7
            })
        );
        let m = manifest_with(&[3, 0]);
        assert_eq!(balanced_batch_indices(&m, 4, 1, 0), Err(BalanceError::EmptyClass(1)));
    }

    proptest! {
        #[test]
        fn weight_identities(counts in proptest::collection::vec(1u64..10_000, 1..10)) {
            let c = ClassCounts::new(counts.clone());
            let inv = class_weights(&c, WeightMode::InverseFreq).unwrap();
            let over = class_weights(&c, WeightMode::InverseFreqOverC).unwrap();
            let n = c.total() as f64;
            for (i, &ni) in counts.iter().enumerate() {
                prop_assert!((inv.weights()[i] * ni as f64 - n).abs() <= 1e-9 * n);
                let ratio = inv.weights()[i] / over.weights()[i];
                prop_assert!((ratio - counts.len() as f64).abs() < 1e-9);
            }
            let argmax_n = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
            let min_w = inv.weights().iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(inv.weights()[argmax_n], min_w);
        }

        #[test]
        fn batch_stream_is_near_uniform(
            counts in proptest::collection::vec(1usize..30, 2..8),
            extra in 0usize..20,
            n_batches in 1usize..40,
            seed in any::<u64>(),
        ) {
            let m = manifest_with(&counts);
            let classes = counts.len();
            let batch_size = classes + extra;
            let batches = balanced_batch_indices(&m, batch_size, n_batches, seed).unwrap();
            prop_assert_eq!(&batches, &balanced_batch_indices(&m, batch_size, n_batches, seed).unwrap());
            let labels = m.labels();
            let mut freq = vec![0usize; classes];
            for b in &batches {
                prop_assert_eq!(b.len(), batch_size);
                let mut hist = vec![0usize; classes];
                for &i in b {
                    hist[labels[i]] += 1;
                }
                for &h in &hist {
                    prop_assert!(h == batch_size / classes || h == batch_size / classes + 1);
                }
                for (f, h) in freq.iter_mut().zip(hist) {
                    *f += h;
                }
            }
            let uniform = (n_batches * batch_size) as f64 / classes as f64;
            for f in freq {
                prop_assert!((f as f64 - uniform).abs() <= 1.0);
            }
        }
    }
}
