//! File-to-file steps behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};

use crate::balance::{self, ClassWeights, DiagnosisWeights, WeightMode};
use crate::cropper::{self, CropGrid};
use crate::ensemble::{self, EnsembleSpec, Member, ModelKind, Rule, SearchResult};
use crate::error::Error;
use crate::ingest::{self, DatasetTag, IngestError, PredictionTensor};
use crate::meta::{self, MetaCv, MetaModel, SvmParams};
use crate::metrics::Report;
use crate::splits::{self, FoldAssignment};
use crate::trainer::{self, Sampler, TrainConfig, TrainOutcome};

pub type Result<T> = std::result::Result<T, Error>;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| {
        Error::Ingest(IngestError::Io {
            path: dir.display().to_string(),
            source,
        })
    })
}

pub fn split(manifest: &Path, classes: usize, k: usize, seed: u64, out: &Path) -> Result<FoldAssignment> {
    let manifest = ingest::load_manifest(manifest, classes)?;
    let folds = splits::stratified_group_kfold(&manifest, k, seed)?;
    splits::save_folds(out, &folds)?;
    Ok(folds)
}

#[derive(Debug, Clone)]
pub enum CountSource {
    Counts(PathBuf),
    /// Primary samples of a manifest with the given class count.
    Manifest(PathBuf, usize),
}

pub fn weights(source: &CountSource, mode: WeightMode, out: &Path) -> Result<ClassWeights> {
    let counts = match source {
        CountSource::Counts(path) => ingest::load_counts(path)?,
        CountSource::Manifest(path, classes) => {
            let manifest = ingest::load_manifest(path, *classes)?;
            ingest::class_counts(&manifest, Some(DatasetTag::Primary))?
        }
    };
    let w = balance::class_weights(&counts, mode)?;
    balance::save_weights(out, &w)?;
    Ok(w)
}

pub fn crops(height: usize, width: usize, size: usize, count: usize, out: &Path) -> Result<CropGrid> {
    let grid = cropper::crop_grid(height, width, size, count)?;
    grid.save(out)?;
    Ok(grid)
}

/// Loss weighting or sampling used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balance {
    Weighted(WeightMode),
    Batch,
}

impl std::str::FromStr for Balance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "batch" {
            return Ok(Balance::Batch);
        }
        s.parse::<WeightMode>()
            .map(Balance::Weighted)
            .map_err(|_| Error::InvalidArgument(format!("balance mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub classes: usize,
    /// Held-out fold; `None` trains on everything.
    pub folds: Option<(PathBuf, usize)>,
    /// Precomputed class weights, overriding `balance`.
    pub weights: Option<PathBuf>,
    pub balance: Balance,
    pub diagnosis: DiagnosisWeights,
    pub config: TrainConfig,
    pub out_dir: PathBuf,
}

/// Writes `model.csv` (best checkpoint), `model_last.csv` and
/// `history.csv` to `out_dir`. Class weights are computed from the primary
/// samples of the training portion.
pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let manifest = ingest::load_manifest(&args.manifest, args.classes)?;
    let features = trainer::load_features(&args.features, &manifest)?;
    if features.len_of(Axis(1)) != 1 {
        return Err(Error::InvalidArgument(
            "training features must have one row per sample".into(),
        ));
    }
    let features = features.index_axis(Axis(1), 0);
    let folds = match &args.folds {
        Some((path, fold)) => Some((splits::load_folds(path, &manifest)?, *fold)),
        None => None,
    };
    let mode = match args.balance {
        Balance::Weighted(mode) => mode,
        Balance::Batch => WeightMode::None,
    };
    let cw = match &args.weights {
        Some(path) => balance::read_weights(ingest_open(path)?, mode).map_err(|e| e.at_path(path))?,
        None => {
            let train_ids: Vec<String> = match &folds {
                Some((f, fold)) => splits::fold_split(f, *fold, args.config.secondary)?.0,
                None => manifest.samples().iter().map(|s| s.sample_id.clone()).collect(),
            };
            let counts = ingest::class_counts(&manifest.subset(&train_ids)?, Some(DatasetTag::Primary))?;
            balance::class_weights(&counts, mode)?
        }
    };
    let sampler = match args.balance {
        Balance::Batch => Sampler::Balanced,
        Balance::Weighted(_) => Sampler::Shuffled,
    };
    let outcome = trainer::train(
        features,
        &manifest,
        folds.as_ref().map(|(f, fold)| (f, *fold)),
        &cw,
        &args.diagnosis,
        &args.config,
        sampler,
    )?;
    ensure_dir(&args.out_dir)?;
    outcome.best.save(&args.out_dir.join("model.csv"))?;
    outcome.last.save(&args.out_dir.join("model_last.csv"))?;
    trainer::save_history(&args.out_dir.join("history.csv"), &outcome.history)?;
    Ok(outcome)
}

fn ingest_open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|source| {
        Error::Ingest(IngestError::Io {
            path: path.display().to_string(),
            source,
        })
    })
}

/// Scores every crop row of `features` and writes them as predictions of
/// `model_id`.
pub fn evaluate(
    model: &Path,
    features: &Path,
    manifest: &Path,
    classes: usize,
    model_id: &str,
    out: &Path,
) -> Result<PredictionTensor> {
    let manifest = ingest::load_manifest(manifest, classes)?;
    let model = trainer::load_model(model)?;
    if model.classes() != classes {
        return Err(Error::InvalidArgument(format!(
            "model scores {} classes, manifest has {classes}",
            model.classes()
        )));
    }
    let features = trainer::load_features(features, &manifest)?;
    let (s, r, d) = features.dim();
    if d != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "features have {d} dimensions, model expects {}",
            model.dim()
        )));
    }
    let flat = features.to_shape((s * r, d)).expect("contiguous");
    let probs = trainer::predict_proba(&model, flat.view());
    let values = probs.into_shape_with_order((1, s, r, classes)).expect("same size");
    let ids = manifest.samples().iter().map(|x| x.sample_id.clone()).collect();
    let tensor = PredictionTensor::new(vec![model_id.to_owned()], ids, values)?;
    ingest::save_predictions(out, &tensor)?;
    Ok(tensor)
}

/// Stacks the flattened crops of every `(model, sample)` pair as training
/// rows labelled from the manifest.
fn stacked_rows(tensor: &PredictionTensor, labels: &[usize]) -> (ndarray::Array2<f64>, Vec<usize>) {
    let (m, s, r, c) = tensor.values().dim();
    let flat = tensor.values().to_shape((m * s, r, c)).expect("contiguous");
    let x = meta::flatten_samples(flat.view());
    let y = (0..m).flat_map(|_| labels.iter().copied()).collect();
    (x, y)
}

#[derive(Debug, Clone)]
pub struct MetaTrainArgs {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub classes: usize,
    pub params: SvmParams,
    /// Folds for the internal cross-validation estimate, if wanted.
    pub cv_folds: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Fits the meta model and writes it even when the solver did not
/// converge; that case is then reported as an error.
pub fn meta_train(args: &MetaTrainArgs) -> Result<(MetaModel, Option<MetaCv>)> {
    let manifest = ingest::load_manifest(&args.manifest, args.classes)?;
    let tensor = ingest::load_predictions(&args.predictions, &manifest)?;
    let (x, y) = stacked_rows(&tensor, &manifest.labels());
    let cv = match args.cv_folds {
        Some(k) => Some(meta::meta_cv(x.view(), &y, args.classes, k, &args.params, args.seed, true)?),
        None => None,
    };
    let model = meta::meta_fit(x.view(), &y, args.classes, &args.params)?;
    model.save(&args.out)?;
    model.ensure_converged()?;
    Ok((model, cv))
}

/// One-hot meta predictions per model, written with a single crop.
pub fn meta_predict(
    meta_model: &Path,
    predictions: &Path,
    manifest: &Path,
    classes: usize,
    out: &Path,
) -> Result<PredictionTensor> {
    let manifest = ingest::load_manifest(manifest, classes)?;
    let meta = meta::load_meta_model(meta_model)?;
    let tensor = ingest::load_predictions(predictions, &manifest)?;
    let (m, s, _, c) = tensor.values().dim();
    let mut values = Array4::zeros((m, s, 1, c));
    for model in 0..m {
        let x = meta::flatten_samples(tensor.model(model));
        let onehot = meta::one_hot(&meta.predict_batch(x.view())?, c);
        values
            .index_axis_mut(Axis(0), model)
            .index_axis_mut(Axis(1), 0)
            .assign(&onehot);
    }
    let out_tensor = PredictionTensor::new(tensor.model_ids().to_vec(), tensor.sample_ids().to_vec(), values)?;
    ingest::save_predictions(out, &out_tensor)?;
    Ok(out_tensor)
}

#[derive(Debug, Clone)]
pub struct SearchArgs {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub classes: usize,
    pub top_k: usize,
    pub rule: Rule,
    /// Ids of models trained on all data; the rest are fold models.
    pub full_models: Vec<String>,
    pub out: PathBuf,
}

/// Searches crop-averaged predictions and writes the chosen members with
/// unit weights.
pub fn ensemble_search(args: &SearchArgs) -> Result<(SearchResult, EnsembleSpec)> {
    let manifest = ingest::load_manifest(&args.manifest, args.classes)?;
    let tensor = ingest::load_predictions(&args.predictions, &manifest)?;
    for id in &args.full_models {
        if tensor.model_index(id).is_none() {
            return Err(IngestError::UnknownModelId(id.clone()).into());
        }
    }
    let averaged = tensor.crop_mean();
    let result = ensemble::subset_search(averaged.view(), &manifest.labels(), args.top_k, args.rule)?;
    let members = result
        .members
        .iter()
        .map(|&m| {
            let id = &tensor.model_ids()[m];
            Member {
                model_id: id.clone(),
                weight: 1.0,
                kind: if args.full_models.contains(id) { ModelKind::Full } else { ModelKind::Cv },
            }
        })
        .collect();
    let spec = EnsembleSpec::new(members, args.rule)?;
    spec.save(&args.out)?;
    Ok((result, spec))
}

#[derive(Debug, Clone)]
pub struct FinalArgs {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub classes: usize,
    pub ensemble: PathBuf,
    pub meta: Option<PathBuf>,
    pub full_weight: f64,
    pub out_dir: PathBuf,
}

/// Crop aggregation, meta prediction for fold models, weighted averaging,
/// then `final_predictions.csv` and `report.csv` in `out_dir`.
pub fn final_predictions(args: &FinalArgs) -> Result<(ndarray::Array2<f64>, Report)> {
    let manifest = ingest::load_manifest(&args.manifest, args.classes)?;
    let tensor = ingest::load_predictions(&args.predictions, &manifest)?;
    let spec = ensemble::load_ensemble(&args.ensemble, Rule::Average)?;
    let meta = match &args.meta {
        Some(path) => Some(meta::load_meta_model(path)?),
        None => None,
    };
    let full = tensor.select_models(&spec.ids_of(ModelKind::Full))?;
    let cv = tensor.select_models(&spec.ids_of(ModelKind::Cv))?;
    let probs = ensemble::final_predict(full.values().view(), cv.values().view(), meta.as_ref(), args.full_weight)?;
    ensure_dir(&args.out_dir)?;
    ensemble::save_final_predictions(&args.out_dir.join("final_predictions.csv"), tensor.sample_ids(), probs.view())?;
    let report = Report::compute(&manifest.labels(), probs.view())?;
    report.save(&args.out_dir.join("report.csv"))?;
    Ok((probs, report))
}

/// Recomputes metrics from `final_predictions.csv` and the manifest labels.
pub fn report(
    final_predictions: &Path,
    manifest: &Path,
    classes: usize,
    folds: Option<&Path>,
    out: &Path,
) -> Result<Report> {
    let manifest = ingest::load_manifest(manifest, classes)?;
    let (ids, probs) = ensemble::load_final_predictions(final_predictions)?;
    if probs.ncols() != classes {
        return Err(Error::InvalidArgument(format!(
            "{} probability columns for {classes} classes",
            probs.ncols()
        )));
    }
    let truth = ids
        .iter()
        .map(|id| {
            manifest
                .position(id)
                .map(|i| manifest.samples()[i].label)
                .ok_or_else(|| IngestError::UnknownSampleId(id.clone()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut report = Report::compute(&truth, probs.view())?;
    if let Some(path) = folds {
        let folds = splits::load_folds(path, &manifest)?;
        let per_sample = ids
            .iter()
            .map(|id| {
                folds
                    .fold_of(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("sample `{id}` has no fold")))
            })
            .collect::<Result<Vec<_>>>()?;
        report = report.with_folds(&truth, probs.view(), &per_sample)?;
    }
    report.save(out)?;
    Ok(report)
}
