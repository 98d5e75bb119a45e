//! Weighted cross-entropy training of a linear softmax classifier.
//!
//! The loss for one sample is `w * -log softmax(z)[y]` where `w` is the
//! product of its class weight and diagnosis factor. Parameters are updated
//! with Adam under a stepwise learning-rate schedule: `lr0` until
//! `first_drop`, then multiplied by `decay` every `drop_every` epochs.
//! Validation WACC is measured every `eval_every` epochs and the parameters
//! at the best measurement are kept alongside the final ones.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::balance::{sample_weight, BalanceError, BalancedBatches, ClassWeights, DiagnosisWeights};
use crate::csvio::{self, Header};
use crate::ingest::{DatasetTag, IngestError, SampleManifest};
use crate::metrics::{argmax, confusion_matrix, wacc, MetricsError};
use crate::splits::{fold_split, FoldAssignment, SecondaryPolicy, SplitError};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} outside 0..{max_epochs}")]
    EpochOutOfRange { epoch: usize, max_epochs: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `C x D` weights and a `C` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SoftmaxModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self, TrainError> {
        if weights.nrows() != bias.len() {
            return Err(TrainError::DimensionMismatch(format!(
                "{} weight rows vs {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(TrainError::InvalidConfig("non-finite model parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        csvio::write_atomic(path, |w| write_model(self, w))
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// `w * (-log softmax(logits)[label])` in log-sum-exp form.
///
/// ```
/// use imbalkit::trainer::weighted_ce_loss;
/// use ndarray::array;
/// let l = weighted_ce_loss(array![1000.0, 0.0].view(), 0, 1.0);
/// assert!(l.abs() < 1e-12);
/// ```
pub fn weighted_ce_loss(logits: ArrayView1<'_, f64>, label: usize, w: f64) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    w * (lse - logits[label])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Analytic gradient of [`weighted_ce_loss`] with respect to the model.
/// The logit gradient is `w * (softmax - onehot(label))`.
pub fn loss_gradient(model: &SoftmaxModel, x: ArrayView1<'_, f64>, label: usize, w: f64) -> Gradients {
    let mut g = softmax(model.logits(x).view());
    g[label] -= 1.0;
    g *= w;
    let weights = g
        .view()
        .insert_axis(Axis(1))
        .dot(&x.insert_axis(Axis(0)));
    Gradients { weights, bias: g }
}

pub fn predict_proba(model: &SoftmaxModel, features: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut logits = features.dot(&model.weights.t());
    for mut row in logits.outer_iter_mut() {
        row += &model.bias;
        let p = softmax(row.view());
        row.assign(&p);
    }
    logits
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub first_drop: usize,
    pub drop_every: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub secondary: SecondaryPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0005,
            decay: 0.2,
            first_drop: 50,
            drop_every: 25,
            max_epochs: 125,
            eval_every: 5,
            batch_size: 40,
            seed: 0,
            adam: AdamParams::default(),
            secondary: SecondaryPolicy::AddToTrain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_owned()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.drop_every == 0 || self.eval_every == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("drop_every, eval_every, batch_size and max_epochs must be positive");
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.max_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            max_epochs: cfg.max_epochs,
        });
    }
    let drops = if epoch < cfg.first_drop {
        0
    } else {
        1 + (epoch - cfg.first_drop) / cfg.drop_every
    };
    Ok(cfg.lr0 * cfg.decay.powi(drops as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    #[default]
    Shuffled,
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted loss over the samples drawn this epoch.
    pub train_loss: f64,
    pub val_wacc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: SoftmaxModel,
    pub last: SoftmaxModel,
    pub history: Vec<EpochRecord>,
    /// Epoch of the kept checkpoint, `None` without a validation split.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn evaluations(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.history.iter().filter_map(|r| r.val_wacc.map(|w| (r.epoch, w)))
    }

    pub fn best_wacc(&self) -> Option<f64> {
        let epoch = self.best_epoch?;
        self.history[epoch].val_wacc
    }
}

struct Adam {
    params: AdamParams,
    step: i32,
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

impl Adam {
    fn new(params: AdamParams, classes: usize, dim: usize) -> Self {
        Self {
            params,
            step: 0,
            m_w: Array2::zeros((classes, dim)),
            v_w: Array2::zeros((classes, dim)),
            m_b: Array1::zeros(classes),
            v_b: Array1::zeros(classes),
        }
    }

    fn update(&mut self, model: &mut SoftmaxModel, grad: &Gradients, lr: f64) {
        self.step += 1;
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        };
        Zip::from(&mut model.weights)
            .and(&mut self.m_w)
            .and(&mut self.v_w)
            .and(&grad.weights)
            .for_each(apply);
        Zip::from(&mut model.bias)
            .and(&mut self.m_b)
            .and(&mut self.v_b)
            .and(&grad.bias)
            .for_each(apply);
    }
}

fn validation_wacc(
    model: &SoftmaxModel,
    features: ArrayView2<'_, f64>,
    rows: &[usize],
    labels: &[usize],
) -> Result<f64, MetricsError> {
    let predicted: Vec<usize> = rows
        .iter()
        .map(|&i| argmax(model.logits(features.row(i)).iter().copied()))
        .collect();
    let truth: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    wacc(&confusion_matrix(&truth, &predicted, model.classes())?)
}

/// Trains from zero-initialized parameters.
///
/// With `split = Some((folds, fold))` the fold is held out for validation;
/// otherwise every sample trains (secondary ones subject to
/// `cfg.secondary`) and the best model is the last one.
pub fn train(
    features: ArrayView2<'_, f64>,
    manifest: &SampleManifest,
    split: Option<(&FoldAssignment, usize)>,
    cw: &ClassWeights,
    dw: &DiagnosisWeights,
    cfg: &TrainConfig,
    sampler: Sampler,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let classes = manifest.class_count();
    if features.nrows() != manifest.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "{} feature rows for {} manifest samples",
            features.nrows(),
            manifest.len()
        )));
    }
    if cw.class_count() != classes {
        return Err(TrainError::DimensionMismatch(format!(
            "{} class weights for {classes} classes",
            cw.class_count()
        )));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(TrainError::InvalidConfig("non-finite feature value".into()));
    }

    let to_rows = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .map(|id| manifest.position(id).expect("fold ids come from the manifest"))
            .collect()
    };
    let (train_rows, val_rows) = match split {
        Some((folds, fold)) => {
            let (train_ids, val_ids) = fold_split(folds, fold, cfg.secondary)?;
            for id in train_ids.iter().chain(&val_ids) {
                if manifest.position(id).is_none() {
                    return Err(TrainError::DimensionMismatch(format!(
                        "fold sample `{id}` is not in the manifest"
                    )));
                }
            }
            (to_rows(&train_ids), to_rows(&val_ids))
        }
        None => {
            let rows = manifest
                .samples()
                .iter()
                .enumerate()
                .filter(|(_, s)| {
                    s.dataset == DatasetTag::Primary || cfg.secondary == SecondaryPolicy::AddToTrain
                })
                .map(|(i, _)| i)
                .collect();
            (rows, Vec::new())
        }
    };
    if train_rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    let labels = manifest.labels();
    let sample_w: Vec<f64> = manifest
        .samples()
        .iter()
        .map(|s| sample_weight(s.label, s.diagnosis, cw, dw))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut balanced = match sampler {
        Sampler::Balanced => {
            let train_labels: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();
            Some(BalancedBatches::new(&train_labels, classes, cfg.batch_size, cfg.seed)?)
        }
        Sampler::Shuffled => None,
    };
    let batches_per_epoch = train_rows.len().div_ceil(cfg.batch_size);

    let mut model = SoftmaxModel::zeros(classes, features.ncols());
    let mut adam = Adam::new(cfg.adam, classes, features.ncols());
    let mut best: Option<(usize, f64, SoftmaxModel)> = None;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut order = train_rows.clone();
    let mut grad = Gradients {
        weights: Array2::zeros(model.weights.raw_dim()),
        bias: Array1::zeros(classes),
    };

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg)?;
        let batches: Vec<Vec<usize>> = match balanced.as_mut() {
            Some(stream) => stream
                .by_ref()
                .take(batches_per_epoch)
                .map(|b| b.into_iter().map(|local| train_rows[local]).collect())
                .collect(),
            None => {
                order.shuffle(&mut rng);
                order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
            }
        };
        let mut epoch_loss = 0.0;
        let mut drawn = 0usize;
        for batch in &batches {
            grad.weights.fill(0.0);
            grad.bias.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = features.row(i);
                let logits = model.logits(x);
                epoch_loss += weighted_ce_loss(logits.view(), labels[i], sample_w[i]);
                let mut g = softmax(logits.view());
                g[labels[i]] -= 1.0;
                g *= sample_w[i] * scale;
                for (c, gc) in g.iter().enumerate() {
                    grad.weights.row_mut(c).scaled_add(*gc, &x);
                }
                grad.bias += &g;
            }
            drawn += batch.len();
            adam.update(&mut model, &grad, lr);
        }

        let val_wacc = if !val_rows.is_empty() && (epoch + 1) % cfg.eval_every == 0 {
            let w = validation_wacc(&model, features, &val_rows, &labels)?;
            if best.as_ref().map_or(true, |(_, b, _)| w > *b) {
                best = Some((epoch, w, model.clone()));
            }
            Some(w)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / drawn as f64,
            val_wacc,
        });
    }

    let (best_epoch, best_model) = match best {
        Some((epoch, _, m)) => (Some(epoch), m),
        None => (None, model.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        history,
        best_epoch,
    })
}

/// Model file: one row per class, `class,w_0,...,w_{D-1},bias`. Values are
/// written in shortest round-trip form so a reload is bit-exact.
pub fn write_model<W: Write>(model: &SoftmaxModel, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    let mut header = vec!["class".to_owned()];
    header.extend((0..model.dim()).map(|d| format!("w_{d}")));
    header.push("bias".into());
    csvio::write_row(&mut wtr, &header)?;
    for (c, row) in model.weights.outer_iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push(model.bias[c].to_string());
        csvio::write_row(&mut wtr, &rec)?;
    }
    csvio::finish(wtr)
}

pub fn read_model<R: Read>(input: R) -> Result<SoftmaxModel, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let class_col = header.require("class")?;
    let w_cols = header.numbered("w_");
    let bias_col = header.require("bias")?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let class: usize = csvio::parse_field(&record, class_col, "class")?;
        if class != rows.len() {
            return Err(IngestError::InvalidValue {
                line: csvio::line_of(&record),
                column: "class".into(),
                value: class.to_string(),
            });
        }
        let w = w_cols
            .iter()
            .enumerate()
            .map(|(d, &col)| csvio::parse_f64(&record, col, &format!("w_{d}")))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((w, csvio::parse_f64(&record, bias_col, "bias")?));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let dim = w_cols.len();
    let weights = Array2::from_shape_fn((rows.len(), dim), |(c, d)| rows[c].0[d]);
    let bias = rows.iter().map(|r| r.1).collect();
    Ok(SoftmaxModel { weights, bias })
}

pub fn load_model(path: &Path) -> Result<SoftmaxModel, IngestError> {
    read_model(csvio::open(path)?).map_err(|e| e.at_path(path))
}

pub fn write_history<W: Write>(history: &[EpochRecord], output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["epoch", "lr", "train_loss", "val_wacc"])?;
    for r in history {
        csvio::write_row(
            &mut wtr,
            [
                r.epoch.to_string(),
                csvio::format_sig9(r.lr),
                csvio::format_sig9(r.train_loss),
                r.val_wacc.map(csvio::format_sig9).unwrap_or_default(),
            ],
        )?;
    }
    csvio::finish(wtr)
}

pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_history(history, w))
}

/// Reads `sample_id,[crop_index,]x_0,...,x_{D-1}` into a `(sample, crop, dim)`
/// array ordered like `manifest`. Without a `crop_index` column every sample
/// has a single crop.
pub fn read_features<R: Read>(input: R, manifest: &SampleManifest) -> Result<Array3<f64>, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let id_col = header.require("sample_id")?;
    let crop_col = header.find("crop_index");
    let x_cols = header.numbered("x_");
    if x_cols.is_empty() {
        return Err(IngestError::MissingColumn("x_0".into()));
    }
    let mut cells: Vec<Vec<Option<Vec<f64>>>> = vec![Vec::new(); manifest.len()];
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let id = csvio::field(&record, id_col, "sample_id")?;
        let s = manifest
            .position(id)
            .ok_or_else(|| IngestError::UnknownSampleId(id.to_owned()))?;
        let crop: usize = match crop_col {
            Some(c) => csvio::parse_field(&record, c, "crop_index")?,
            None => 0,
        };
        let x = x_cols
            .iter()
            .enumerate()
            .map(|(d, &col)| csvio::parse_f64(&record, col, &format!("x_{d}")))
            .collect::<Result<Vec<_>, _>>()?;
        let slots = &mut cells[s];
        if slots.len() <= crop {
            slots.resize(crop + 1, None);
        }
        if slots[crop].replace(x).is_some() {
            return Err(IngestError::DuplicateRow {
                model_id: "features".into(),
                sample_id: id.to_owned(),
                crop,
            });
        }
    }
    let crops = cells.first().map_or(0, Vec::len);
    let mut out = Array3::zeros((manifest.len(), crops, x_cols.len()));
    for (s, slots) in cells.iter().enumerate() {
        let sample_id = &manifest.samples()[s].sample_id;
        if slots.is_empty() {
            return Err(IngestError::MissingSample {
                model_id: "features".into(),
                sample_id: sample_id.clone(),
            });
        }
        if slots.len() != crops {
            return Err(IngestError::RaggedCrops {
                model_id: "features".into(),
                sample_id: sample_id.clone(),
                expected: crops,
                found: slots.len(),
            });
        }
        for (r, slot) in slots.iter().enumerate() {
            let x = slot.as_ref().ok_or_else(|| IngestError::MissingCell {
                model_id: "features".into(),
                sample_id: sample_id.clone(),
                crop: r,
            })?;
            out.slice_mut(ndarray::s![s, r, ..])
                .assign(&ArrayView1::from(x.as_slice()));
        }
    }
    let _ = header.len();
    Ok(out)
}

pub fn load_features(path: &Path, manifest: &SampleManifest) -> Result<Array3<f64>, IngestError> {
    read_features(csvio::open(path)?, manifest).map_err(|e| e.at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{class_weights, WeightMode};
    use crate::ingest::{class_counts, Sample};
    use crate::splits::stratified_group_kfold;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    #[allow(clippy::approx_constant)]
    fn loss_examples() {
        let zero = array![0.0, 0.0];
        assert!((weighted_ce_loss(zero.view(), 0, 1.0) - 0.693147).abs() < 1e-6);
        assert!((weighted_ce_loss(zero.view(), 0, 2.0) - 1.386294).abs() < 1e-6);
        let big = array![1000.0, 0.0];
        let l = weighted_ce_loss(big.view(), 0, 1.0);
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!((weighted_ce_loss(big.view(), 1, 1.0) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_optimum_and_zero_weight() {
        // logits (800, 0, 0): softmax is one-hot up to exp(-800) = 0
        let model = SoftmaxModel::new(array![[1.0], [0.0], [0.0]], array![0.0, 0.0, 0.0]).unwrap();
        let x = array![800.0];
        let g = loss_gradient(&model, x.view(), 0, 1.0);
        assert!(g.weights.iter().chain(g.bias.iter()).all(|&v| v == 0.0));
        let g = loss_gradient(&model, array![0.3].view(), 1, 0.0);
        assert!(g.weights.iter().chain(g.bias.iter()).all(|&v| v == 0.0));
    }

    fn loss_of(model: &SoftmaxModel, x: ArrayView1<'_, f64>, label: usize, w: f64) -> f64 {
        weighted_ce_loss(model.logits(x).view(), label, w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gradient_matches_central_differences(
            classes in 2usize..6,
            dim in 1usize..6,
            seed in any::<u64>(),
            w in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SoftmaxModel::new(
                Array2::from_shape_fn((classes, dim), |_| rng.gen_range(-2.0..2.0)),
                Array1::from_shape_fn(classes, |_| rng.gen_range(-1.0..1.0)),
            ).unwrap();
            let x = Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0));
            let label = rng.gen_range(0..classes);
            let g = loss_gradient(&model, x.view(), label, w);
            let eps = 1e-5;
            for c in 0..classes {
                for d in 0..=dim {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let analytic = if d == dim {
                        plus.bias[c] += eps;
                        minus.bias[c] -= eps;
                        g.bias[c]
                    } else {
                        plus.weights[[c, d]] += eps;
                        minus.weights[[c, d]] -= eps;
                        g.weights[[c, d]]
                    };
                    let numeric = (loss_of(&plus, x.view(), label, w) - loss_of(&minus, x.view(), label, w)) / (2.0 * eps);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                    prop_assert!(rel < 1e-4, "c={} d={} analytic={} numeric={}", c, d, analytic, numeric);
                }
            }
        }

        #[test]
        fn lr_is_non_increasing(a in 0usize..125, b in 0usize..125) {
            let cfg = TrainConfig::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr_at(hi, &cfg).unwrap() <= lr_at(lo, &cfg).unwrap());
        }

        #[test]
        fn predictions_are_stochastic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SoftmaxModel::new(
                Array2::from_shape_fn((4, 3), |_| rng.gen_range(-30.0..30.0)),
                Array1::from_shape_fn(4, |_| rng.gen_range(-5.0..5.0)),
            ).unwrap();
            let x = Array2::from_shape_fn((10, 3), |_| rng.gen_range(-10.0..10.0));
            for row in predict_proba(&model, x.view()).outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0005);
        assert_eq!(lr_at(49, &cfg).unwrap(), 0.0005);
        assert!((lr_at(50, &cfg).unwrap() - 0.0001).abs() < 1e-18);
        assert!((lr_at(74, &cfg).unwrap() - 0.0001).abs() < 1e-18);
        assert!((lr_at(75, &cfg).unwrap() - 0.00002).abs() < 1e-18);
        assert!((lr_at(100, &cfg).unwrap() - 0.000004).abs() < 1e-18);
        assert_eq!(
            lr_at(125, &cfg),
            Err(TrainError::EpochOutOfRange {
                epoch: 125,
                max_epochs: 125
            })
        );
    }

    #[test]
    fn predict_proba_examples() {
        let zero = SoftmaxModel::zeros(3, 2);
        let p = predict_proba(&zero, array![[1.0, 2.0], [-3.0, 0.5]].view());
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let m = SoftmaxModel::new(array![[0.0], [0.0], [5.0]], array![0.0, 0.0, 0.0]).unwrap();
        let p = predict_proba(&m, array![[2.0]].view());
        assert_eq!(argmax(p.row(0).iter().copied()), 2);
    }

    fn blobs(
        counts: &[usize],
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> (SampleManifest, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let i = samples.len();
                samples.push(Sample::new(format!("s{i}"), format!("g{i}"), c));
                let row: Vec<f64> = (0..dim)
                    .map(|d| {
                        let centre = if d == c % dim { 3.0 } else { 0.0 };
                        centre + spread * (rng.gen::<f64>() - 0.5)
                    })
                    .collect();
                rows.push(row);
            }
        }
        let x = Array2::from_shape_fn((rows.len(), dim), |(i, d)| rows[i][d]);
        (SampleManifest::new(samples, counts.len()).unwrap(), x)
    }

    /// Independent feasibility check: the perceptron converges to zero
    /// training errors iff the two classes are linearly separable.
    fn perceptron_separates(x: ArrayView2<'_, f64>, labels: &[usize]) -> bool {
        let mut w = Array1::<f64>::zeros(x.ncols() + 1);
        for _ in 0..1000 {
            let mut errors = 0;
            for (row, &l) in x.outer_iter().zip(labels) {
                let y = if l == 1 { 1.0 } else { -1.0 };
                let score = row.dot(&w.slice(ndarray::s![..-1])) + w[x.ncols()];
                if y * score <= 0.0 {
                    errors += 1;
                    w.slice_mut(ndarray::s![..-1]).scaled_add(y, &row);
                    w[x.ncols()] += y;
                }
            }
            if errors == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn separable_data_is_learned() {
        let (m, x) = blobs(&[60, 60], 2, 1.0, 4);
        assert!(perceptron_separates(x.view(), &m.labels()));
        let out = train(
            x.view(),
            &m,
            None,
            &ClassWeights::uniform(2),
            &DiagnosisWeights::default(),
            &TrainConfig::default(),
            Sampler::Shuffled,
        )
        .unwrap();
        assert_eq!(out.best, out.last);
        assert_eq!(out.best_epoch, None);
        let all: Vec<usize> = (0..m.len()).collect();
        assert_eq!(validation_wacc(&out.best, x.view(), &all, &m.labels()).unwrap(), 1.0);
    }

    #[test]
    fn history_and_checkpoint_bookkeeping() {
        let (m, x) = blobs(&[40, 40, 40], 3, 5.0, 8);
        let folds = stratified_group_kfold(&m, 5, 1).unwrap();
        let cw = ClassWeights::uniform(3);
        let dw = DiagnosisWeights::default();
        for sampler in [Sampler::Shuffled, Sampler::Balanced] {
            let cfg = TrainConfig::default();
            let out = train(x.view(), &m, Some((&folds, 2)), &cw, &dw, &cfg, sampler).unwrap();
            assert_eq!(out.history.len(), 125);
            assert_eq!(out.evaluations().count(), 125 / 5);
            assert!(out.evaluations().all(|(e, _)| (e + 1) % 5 == 0));
            let best = out.best_wacc().unwrap();
            let max = out.evaluations().map(|(_, w)| w).fold(f64::MIN, f64::max);
            assert_eq!(best, max);
            let first_max = out.evaluations().find(|(_, w)| *w == max).unwrap().0;
            assert_eq!(out.best_epoch, Some(first_max));
            let last = out.history.last().unwrap().val_wacc.unwrap();
            assert!(best >= last);
            assert!(out.history.iter().all(|r| r.train_loss.is_finite()));

            let again = train(x.view(), &m, Some((&folds, 2)), &cw, &dw, &cfg, sampler).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn weighted_training_runs_on_imbalanced_data() {
        let (m, x) = blobs(&[200, 20, 10], 3, 6.0, 2);
        let folds = stratified_group_kfold(&m, 5, 0).unwrap();
        let counts = class_counts(&m, None).unwrap();
        let cw = class_weights(&counts, WeightMode::InverseFreq).unwrap();
        let out = train(
            x.view(),
            &m,
            Some((&folds, 0)),
            &cw,
            &DiagnosisWeights::default(),
            &TrainConfig { max_epochs: 20, ..TrainConfig::default() },
            Sampler::Shuffled,
        )
        .unwrap();
        assert_eq!(out.evaluations().count(), 4);
    }

    #[test]
    fn rejects_misaligned_inputs() {
        let (m, x) = blobs(&[5, 5], 2, 1.0, 0);
        let short = x.slice(ndarray::s![..9, ..]);
        let err = train(
            short,
            &m,
            None,
            &ClassWeights::uniform(2),
            &DiagnosisWeights::default(),
            &TrainConfig::default(),
            Sampler::Shuffled,
        );
        assert!(matches!(err, Err(TrainError::DimensionMismatch(_))));
        let bad = TrainConfig { decay: 1.5, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn model_and_history_files() {
        let m = SoftmaxModel::new(array![[0.1, -2.5e-7], [1.0 / 3.0, 4.0]], array![0.7, -0.2]).unwrap();
        let mut out = Vec::new();
        write_model(&m, &mut out).unwrap();
        assert!(String::from_utf8(out.clone()).unwrap().starts_with("class,w_0,w_1,bias\n0,0.1,"));
        assert_eq!(read_model(out.as_slice()).unwrap(), m);

        let hist = vec![
            EpochRecord { epoch: 0, lr: 0.0005, train_loss: 0.5, val_wacc: None },
            EpochRecord { epoch: 1, lr: 0.0005, train_loss: 0.25, val_wacc: Some(0.75) },
        ];
        let mut out = Vec::new();
        write_history(&hist, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,lr,train_loss,val_wacc\n0,0.0005,0.5,\n1,0.0005,0.25,0.75\n"
        );
    }

    #[test]
    fn features_with_and_without_crops() {
        let m = SampleManifest::new(vec![Sample::new("a", "g", 0), Sample::new("b", "h", 1)], 2).unwrap();
        let f = read_features("sample_id,x_0,x_1\nb,3,4\na,1,2\n".as_bytes(), &m).unwrap();
        assert_eq!(f.dim(), (2, 1, 2));
        assert_eq!(f[[0, 0, 1]], 2.0);
        let f = read_features(
            "sample_id,crop_index,x_0\na,0,1\na,1,2\nb,1,4\nb,0,3\n".as_bytes(),
            &m,
        )
        .unwrap();
        assert_eq!(f.dim(), (2, 2, 1));
        assert_eq!(f[[1, 1, 0]], 4.0);
        assert!(matches!(
            read_features("sample_id,crop_index,x_0\na,0,1\na,1,2\nb,0,3\n".as_bytes(), &m),
            Err(IngestError::RaggedCrops { .. })
        ));
    }
}
