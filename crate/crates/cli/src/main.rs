use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imbalkit::balance::{DiagnosisWeights, WeightMode};
use imbalkit::ensemble::Rule;
use imbalkit::ingest::Diagnosis;
use imbalkit::meta::{Gamma, SvmParams};
use imbalkit::pipeline::{self, CountSource};
use imbalkit::splits::SecondaryPolicy;
use imbalkit::trainer::TrainConfig;
use imbalkit::Error;

mod config;

/// Evaluation and combination of classifiers on class-imbalanced data.
#[derive(Debug, Parser)]
#[command(name = "imbalkit", version, args_override_self = true)]
struct Cli {
    /// `key = value` file whose entries act as flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = 7)]
    classes: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign primary samples to stratified, group-disjoint folds.
    Split {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "folds.csv")]
        out: PathBuf,
    },
    /// Per-class loss weights from class counts.
    Weights {
        #[arg(long, default_value = "invfreq")]
        mode: WeightMode,
        /// `class_index,count` table.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        counts: Option<PathBuf>,
        /// Count the primary samples of this manifest instead.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        #[arg(long, default_value = "weights.csv")]
        out: PathBuf,
    },
    /// Offsets of the evaluation crop grid.
    Crops {
        #[arg(long, default_value_t = 450)]
        height: usize,
        #[arg(long, default_value_t = 600)]
        width: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 36)]
        n: usize,
        #[arg(long, default_value = "offsets.csv")]
        out: PathBuf,
    },
    /// Train a weighted softmax classifier on feature vectors.
    Train(TrainCmd),
    /// Score per-crop features with a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long, default_value = "model")]
        model_id: String,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Fit the SVM meta learner on flattened crop predictions.
    MetaTrain {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long = "c", default_value_t = 1.0)]
        c_reg: f64,
        /// `auto` or a positive number.
        #[arg(long, default_value = "auto")]
        gamma: Gamma,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_passes: usize,
        /// Also report a stratified k-fold WACC estimate.
        #[arg(long)]
        cv: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "meta.csv")]
        out: PathBuf,
    },
    /// Replace each model's crops with one-hot meta predictions.
    MetaPredict {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long, default_value = "meta_predictions.csv")]
        out: PathBuf,
    },
    /// Exhaustive search over subsets of the best models.
    EnsembleSearch {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long, default_value_t = 15)]
        top_k: usize,
        #[arg(long, default_value = "average")]
        rule: Rule,
        /// Comma-separated ids of models trained on all data.
        #[arg(long, value_delimiter = ',')]
        full_models: Vec<String>,
        #[arg(long, default_value = "ensemble.csv")]
        out: PathBuf,
    },
    /// Weighted combination of full and fold models, plus a report.
    Final {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        full_weight: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Metrics from final predictions and manifest labels.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Secondary {
    Exclude,
    AddToTrain,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long, requires = "fold")]
    folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    /// `none`, `invfreq`, `invfreq-c` or `batch`.
    #[arg(long, default_value = "invfreq")]
    balance: String,
    /// Class weights file overriding the computed ones.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Loss factor for a diagnosis type, as `type=factor`; repeatable.
    #[arg(long = "diagnosis-weight", value_name = "TYPE=FACTOR")]
    diagnosis_weight: Vec<String>,
    #[arg(long, value_enum, default_value = "add-to-train")]
    secondary: Secondary,
    #[arg(long, default_value_t = 0.0005)]
    lr0: f64,
    #[arg(long, default_value_t = 0.2)]
    decay: f64,
    #[arg(long, default_value_t = 50)]
    first_drop: usize,
    #[arg(long, default_value_t = 25)]
    drop_every: usize,
    #[arg(long, default_value_t = 125)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl TrainCmd {
    fn into_args(self) -> Result<pipeline::TrainArgs, Error> {
        let mut diagnosis = DiagnosisWeights::default();
        for entry in &self.diagnosis_weight {
            let (name, factor) = entry
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("diagnosis weight `{entry}`")))?;
            let d: Diagnosis = name
                .trim()
                .parse()
                .map_err(|()| Error::InvalidArgument(format!("diagnosis `{name}`")))?;
            let f: f64 = factor
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("diagnosis weight `{entry}`")))?;
            diagnosis.set(d, f)?;
        }
        Ok(pipeline::TrainArgs {
            features: self.features,
            manifest: self.manifest.manifest,
            classes: self.manifest.classes,
            folds: self.folds.zip(self.fold),
            weights: self.weights,
            balance: self.balance.parse()?,
            diagnosis,
            config: TrainConfig {
                lr0: self.lr0,
                decay: self.decay,
                first_drop: self.first_drop,
                drop_every: self.drop_every,
                max_epochs: self.epochs,
                eval_every: self.eval_every,
                batch_size: self.batch_size,
                seed: self.seed,
                secondary: match self.secondary {
                    Secondary::Exclude => SecondaryPolicy::Exclude,
                    Secondary::AddToTrain => SecondaryPolicy::AddToTrain,
                },
                ..TrainConfig::default()
            },
            out_dir: self.out_dir,
        })
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Split { manifest, k, seed, out } => {
            let folds = pipeline::split(&manifest.manifest, manifest.classes, k, seed, &out)?;
            log::info!("fold sizes {:?}", folds.fold_sizes());
        }
        Command::Weights {
            mode,
            counts,
            manifest,
            classes,
            out,
        } => {
            let source = match (counts, manifest) {
                (Some(path), _) => CountSource::Counts(path),
                (None, Some(path)) => CountSource::Manifest(path, classes),
                (None, None) => unreachable!("clap requires one source"),
            };
            pipeline::weights(&source, mode, &out)?;
        }
        Command::Crops {
            height,
            width,
            size,
            n,
            out,
        } => {
            pipeline::crops(height, width, size, n, &out)?;
        }
        Command::Train(cmd) => {
            let outcome = pipeline::train(&cmd.into_args()?)?;
            if let (Some(epoch), Some(w)) = (outcome.best_epoch, outcome.best_wacc()) {
                println!("best validation wacc {w:.6} at epoch {epoch}");
            }
        }
        Command::Evaluate {
            model,
            features,
            manifest,
            model_id,
            out,
        } => {
            pipeline::evaluate(&model, &features, &manifest.manifest, manifest.classes, &model_id, &out)?;
        }
        Command::MetaTrain {
            predictions,
            manifest,
            c_reg,
            gamma,
            tol,
            max_passes,
            cv,
            seed,
            out,
        } => {
            let args = pipeline::MetaTrainArgs {
                predictions,
                manifest: manifest.manifest,
                classes: manifest.classes,
                params: SvmParams {
                    c_reg,
                    gamma,
                    tol,
                    max_passes,
                },
                cv_folds: cv,
                seed,
                out,
            };
            let (_, cv) = pipeline::meta_train(&args)?;
            if let Some(cv) = cv {
                println!("meta cv wacc {:.6} over {} folds", cv.mean_wacc, cv.k);
            }
        }
        Command::MetaPredict {
            meta,
            predictions,
            manifest,
            out,
        } => {
            pipeline::meta_predict(&meta, &predictions, &manifest.manifest, manifest.classes, &out)?;
        }
        Command::EnsembleSearch {
            predictions,
            manifest,
            top_k,
            rule,
            full_models,
            out,
        } => {
            let args = pipeline::SearchArgs {
                predictions,
                manifest: manifest.manifest,
                classes: manifest.classes,
                top_k,
                rule,
                full_models,
                out,
            };
            let (result, _) = pipeline::ensemble_search(&args)?;
            println!(
                "best subset wacc {:.6} with {} models ({} subsets evaluated)",
                result.wacc,
                result.members.len(),
                result.evaluated
            );
        }
        Command::Final {
            predictions,
            manifest,
            ensemble,
            meta,
            full_weight,
            out_dir,
        } => {
            let args = pipeline::FinalArgs {
                predictions,
                manifest: manifest.manifest,
                classes: manifest.classes,
                ensemble,
                meta,
                full_weight,
                out_dir,
            };
            let (_, report) = pipeline::final_predictions(&args)?;
            println!("wacc {:.6}", report.wacc);
        }
        Command::Report {
            predictions,
            manifest,
            folds,
            out,
        } => {
            let report = pipeline::report(&predictions, &manifest.manifest, manifest.classes, folds.as_deref(), &out)?;
            println!("wacc {:.6}", report.wacc);
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("IMBALKIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("IMBALKIT_THREADS `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = init_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
