//! RBF-kernel SVM stacked on flattened crop predictions.
//!
//! Binary machines solve the C-SVM dual with SMO, picking the maximal
//! violating pair with second-order gain for the second index. Training
//! rows are put into a canonical order first, so a fit depends only on the
//! set of samples and not on their arrangement.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cropper::flatten_crops;
use crate::csvio::{self, Header};
use crate::ingest::IngestError;
use crate::metrics::{confusion_matrix, wacc, MetricsError};

#[derive(Debug, Error, PartialEq)]
pub enum MetaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("binary problem has a single class")]
    SingleClass,
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("class {class} has {count} samples, fewer than {k} folds")]
    TooFewSamples { class: usize, count: usize, k: usize },
    #[error("label {0} is not +1 or -1")]
    InvalidLabel(i8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("solver stopped after {iterations} iterations with KKT gap {gap}")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `exp(-gamma * |x - z|^2)`.
///
/// ```
/// use imbalkit::meta::rbf_kernel;
/// use ndarray::array;
/// let k = rbf_kernel(array![0.0, 1.0].view(), array![0.0, 0.0].view(), 1.0).unwrap();
/// assert!((k - (-1.0f64).exp()).abs() < 1e-15);
/// ```
pub fn rbf_kernel(x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, gamma: f64) -> Result<f64, MetaError> {
    if x.len() != z.len() {
        return Err(MetaError::DimensionMismatch(format!("{} vs {}", x.len(), z.len())));
    }
    Ok(rbf(x, z, gamma))
}

fn rbf(x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    /// `1 / (F * var(X))` over all entries, or `1 / F` when the variance is 0.
    Auto,
    Fixed(f64),
}

impl Gamma {
    pub fn resolve(self, x: ArrayView2<'_, f64>) -> f64 {
        match self {
            Gamma::Fixed(g) => g,
            Gamma::Auto => {
                let f = x.ncols().max(1) as f64;
                // sorted so the result does not depend on row order
                let mut v: Vec<f64> = x.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                let n = v.len() as f64;
                let var = if n > 0.0 {
                    let mean = v.iter().sum::<f64>() / n;
                    v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n
                } else {
                    0.0
                };
                if var > 0.0 {
                    1.0 / (f * var)
                } else {
                    1.0 / f
                }
            }
        }
    }
}

impl std::str::FromStr for Gamma {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Gamma::Auto);
        }
        match s.parse::<f64>() {
            Ok(g) if g > 0.0 && g.is_finite() => Ok(Gamma::Fixed(g)),
            _ => Err(MetaError::InvalidParameter(format!("gamma `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c_reg: f64,
    pub gamma: Gamma,
    pub tol: f64,
    /// Iteration budget, in multiples of the training-set size.
    pub max_passes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            gamma: Gamma::Auto,
            tol: 1e-3,
            max_passes: 200,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), MetaError> {
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return Err(MetaError::InvalidParameter("c_reg must be positive".into()));
        }
        if let Gamma::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(MetaError::InvalidParameter("gamma must be positive".into()));
            }
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_passes == 0 {
            return Err(MetaError::InvalidParameter("tol and max_passes must be positive".into()));
        }
        Ok(())
    }
}

/// Binary machine: `f(x) = sum_i coef_i k(sv_i, x) + bias` with
/// `coef_i = alpha_i y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Array2<f64>,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c_reg: f64,
    pub converged: bool,
    /// Final maximal KKT violation `m - M`.
    pub kkt_gap: f64,
    pub iterations: usize,
}

impl SvmModel {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.support_vectors
            .outer_iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * rbf(sv, x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn decisions(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.outer_iter().map(|row| self.decision(row)).collect()
    }

    pub fn ensure_converged(&self) -> Result<(), MetaError> {
        if self.converged {
            Ok(())
        } else {
            Err(MetaError::NoConvergence {
                iterations: self.iterations,
                gap: self.kkt_gap,
            })
        }
    }

    /// `1/2 sum_ij coef_i coef_j K_ij - sum_i |coef_i|`, the minimized dual.
    pub fn dual_objective(&self) -> f64 {
        let sv = &self.support_vectors;
        let mut quad = 0.0;
        for (i, a) in sv.outer_iter().enumerate() {
            for (j, b) in sv.outer_iter().enumerate() {
                quad += self.coef[i] * self.coef[j] * rbf(a, b, self.gamma);
            }
        }
        0.5 * quad - self.coef.iter().map(|c| c.abs()).sum::<f64>()
    }
}

fn lex_cmp(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

enum Gram {
    Full(Array2<f64>),
    Lazy,
}

const FULL_GRAM_LIMIT: usize = 4000;
const TAU: f64 = 1e-12;

struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    y: Vec<f64>,
    gamma: f64,
    gram: Gram,
}

impl Problem<'_> {
    fn row(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        match &self.gram {
            Gram::Full(k) => out.extend(k.row(i).iter()),
            Gram::Lazy => {
                let xi = self.x.row(i);
                out.extend(self.x.outer_iter().map(|xt| rbf(xi, xt, self.gamma)));
            }
        }
    }
}

/// Fits a binary SVM on labels `+1` / `-1`.
///
/// A model that exhausts `max_passes * S` iterations is still returned with
/// `converged = false`; see [`SvmModel::ensure_converged`].
pub fn svm_fit(x: ArrayView2<'_, f64>, y: &[i8], params: &SvmParams) -> Result<SvmModel, MetaError> {
    params.validate()?;
    let n = x.nrows();
    if y.len() != n {
        return Err(MetaError::DimensionMismatch(format!("{} labels for {n} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l != 1 && l != -1) {
        return Err(MetaError::InvalidLabel(bad));
    }
    if !(y.contains(&1) && y.contains(&-1)) {
        return Err(MetaError::SingleClass);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(MetaError::InvalidParameter("non-finite feature value".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].cmp(&y[b]).then_with(|| lex_cmp(x.row(a), x.row(b))));
    let xs = x.select(Axis(0), &order);
    let ys: Vec<f64> = order.iter().map(|&i| f64::from(y[i])).collect();
    let gamma = params.gamma.resolve(x);
    let gram = if n <= FULL_GRAM_LIMIT {
        Gram::Full(Array2::from_shape_fn((n, n), |(i, j)| rbf(xs.row(i), xs.row(j), gamma)))
    } else {
        Gram::Lazy
    };
    let problem = Problem {
        x: xs.view(),
        y: ys,
        gamma,
        gram,
    };
    Ok(solve(&problem, params))
}

fn solve(p: &Problem<'_>, params: &SvmParams) -> SvmModel {
    let n = p.y.len();
    let c = params.c_reg;
    let y = &p.y;
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt < 0.0 && a < c) || (yt > 0.0 && a > 0.0);
    let max_iter = params.max_passes.saturating_mul(n).max(1);
    let (mut ki, mut kj) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut iterations = 0;
    let mut gap;

    loop {
        let mut i = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > g_max {
                g_max = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < g_min {
                g_min = v;
            }
        }
        gap = g_max - g_min;
        if i == usize::MAX || gap <= params.tol {
            break;
        }
        if iterations >= max_iter {
            break;
        }
        p.row(i, &mut ki);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let b = g_max + y[t] * grad[t];
            if b > 0.0 {
                // RBF diagonal entries are 1
                let mut a = 2.0 - 2.0 * ki[t];
                if a <= 0.0 {
                    a = TAU;
                }
                let gain = -(b * b) / a;
                if gain < best {
                    best = gain;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        p.row(j, &mut kj);
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let mut quad = ki[i] + kj[j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = ki[i] + kj[j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    let converged = gap <= params.tol;
    if !converged {
        log::warn!("SMO stopped after {iterations} iterations with KKT gap {gap:.3e}");
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            free += 1;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };

    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    SvmModel {
        support_vectors: p.x.select(Axis(0), &sv),
        coef: sv.iter().map(|&t| alpha[t] * y[t]).collect(),
        bias: -rho,
        gamma: p.gamma,
        c_reg: c,
        converged,
        kkt_gap: gap,
        iterations,
    }
}

/// One-vs-rest machines. Two-class problems hold a single machine for
/// class 0 whose negation scores class 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    classes: usize,
    machines: Vec<SvmModel>,
}

impl MetaModel {
    pub fn new(classes: usize, machines: Vec<SvmModel>) -> Result<Self, MetaError> {
        let expected = if classes == 2 { 1 } else { classes };
        if classes < 2 || machines.len() != expected {
            return Err(MetaError::DimensionMismatch(format!(
                "{} machines for {classes} classes",
                machines.len()
            )));
        }
        let dim = machines[0].support_vectors.ncols();
        if machines.iter().any(|m| m.support_vectors.ncols() != dim) {
            return Err(MetaError::DimensionMismatch("machines differ in feature width".into()));
        }
        Ok(Self { classes, machines })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn machines(&self) -> &[SvmModel] {
        &self.machines
    }

    pub fn feature_dim(&self) -> usize {
        self.machines[0].support_vectors.ncols()
    }

    pub fn converged(&self) -> bool {
        self.machines.iter().all(|m| m.converged)
    }

    pub fn ensure_converged(&self) -> Result<(), MetaError> {
        self.machines.iter().try_for_each(SvmModel::ensure_converged)
    }

    pub fn decision_values(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        if self.classes == 2 {
            let d = self.machines[0].decision(x);
            vec![d, -d]
        } else {
            self.machines.iter().map(|m| m.decision(x)).collect()
        }
    }

    /// Class with the largest decision value, ties to the lowest index.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> usize {
        let d = self.decision_values(x);
        let mut best = 0;
        for (c, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>, MetaError> {
        if x.ncols() != self.feature_dim() {
            return Err(MetaError::DimensionMismatch(format!(
                "{} features for a model of width {}",
                x.ncols(),
                self.feature_dim()
            )));
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict(x.row(i)))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        csvio::write_atomic(path, |w| write_meta_model(self, w))
    }
}

/// Per-sample `R x C` crop predictions flattened crop-major into rows.
pub fn flatten_samples(crops: ArrayView3<'_, f64>) -> Array2<f64> {
    let (s, r, c) = crops.dim();
    let mut out = Array2::zeros((s, r * c));
    for (mut row, sample) in out.outer_iter_mut().zip(crops.outer_iter()) {
        row.assign(&flatten_crops(sample));
    }
    out
}

/// Fits one machine per class against the rest, sharing one resolved gamma.
pub fn meta_fit(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    params: &SvmParams,
) -> Result<MetaModel, MetaError> {
    params.validate()?;
    if labels.len() != x.nrows() {
        return Err(MetaError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if classes < 2 {
        return Err(MetaError::InvalidParameter("at least two classes are required".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetaError::Metrics(MetricsError::LabelOutOfRange { label: l, classes }));
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(MetaError::MissingClass(c));
    }
    let shared = SvmParams {
        gamma: Gamma::Fixed(params.gamma.resolve(x)),
        ..*params
    };
    let targets: Vec<usize> = if classes == 2 { vec![0] } else { (0..classes).collect() };
    let machines = targets
        .par_iter()
        .map(|&c| {
            let y: Vec<i8> = labels.iter().map(|&l| if l == c { 1 } else { -1 }).collect();
            svm_fit(x, &y, &shared)
        })
        .collect::<Result<Vec<_>, _>>()?;
    MetaModel::new(classes, machines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaCv {
    pub k: usize,
    pub fold_wacc: Vec<f64>,
    pub mean_wacc: f64,
}

/// Stratified folds: each class is shuffled and dealt round-robin, the deal
/// continuing across classes so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], classes: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

/// Mean validation WACC of [`meta_fit`] over stratified `k` folds.
///
/// When the smallest class has fewer than `k` samples, `allow_reduce`
/// lowers `k` to that size (minimum 2) with a warning; otherwise the call
/// fails with `TooFewSamples`.
pub fn meta_cv(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    k: usize,
    params: &SvmParams,
    seed: u64,
    allow_reduce: bool,
) -> Result<MetaCv, MetaError> {
    if labels.len() != x.nrows() {
        return Err(MetaError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if k < 2 {
        return Err(MetaError::InvalidParameter("k must be at least 2".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(MetaError::Metrics(MetricsError::LabelOutOfRange { label: l, classes }));
        }
        counts[l] += 1;
    }
    let (small, &min) = counts
        .iter()
        .enumerate()
        .min_by_key(|(_, &n)| n)
        .ok_or_else(|| MetaError::InvalidParameter("no classes".into()))?;
    let mut k = k;
    if min < k {
        if allow_reduce && min >= 2 {
            log::warn!("class {small} has {min} samples; reducing meta cross-validation from {k} to {min} folds");
            k = min;
        } else {
            return Err(MetaError::TooFewSamples { class: small, count: min, k });
        }
    }
    let folds = stratified_folds(labels, classes, k, seed);
    let fold_wacc = (0..k)
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
            let val: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
            let xt = x.select(Axis(0), &train);
            let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let model = meta_fit(xt.view(), &yt, classes, params)?;
            let pred = model.predict_batch(x.select(Axis(0), &val).view())?;
            let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
            Ok(wacc(&confusion_matrix(&truth, &pred, classes)?)?)
        })
        .collect::<Result<Vec<_>, MetaError>>()?;
    let mean_wacc = fold_wacc.iter().sum::<f64>() / k as f64;
    Ok(MetaCv { k, fold_wacc, mean_wacc })
}

/// Meta model file: `class,kind,value,x_0,...`. Each machine contributes
/// `gamma`, `c_reg`, `bias`, `converged` and one `sv` row per support vector
/// (`value` is its coefficient); a leading `classes` row gives the class
/// count.
pub fn write_meta_model<W: Write>(model: &MetaModel, output: W) -> Result<(), IngestError> {
    let dim = model.feature_dim();
    let mut wtr = csvio::writer(output);
    let mut header = vec!["class".to_owned(), "kind".into(), "value".into()];
    header.extend((0..dim).map(|d| format!("x_{d}")));
    csvio::write_row(&mut wtr, &header)?;
    let blank = vec![String::new(); dim];
    let scalar = |wtr: &mut csv::Writer<W>, m: usize, kind: &str, value: String| {
        let mut rec = vec![m.to_string(), kind.to_owned(), value];
        rec.extend(blank.iter().cloned());
        csvio::write_row(wtr, &rec)
    };
    scalar(&mut wtr, 0, "classes", model.classes.to_string())?;
    for (m, svm) in model.machines.iter().enumerate() {
        scalar(&mut wtr, m, "gamma", svm.gamma.to_string())?;
        scalar(&mut wtr, m, "c_reg", svm.c_reg.to_string())?;
        scalar(&mut wtr, m, "bias", svm.bias.to_string())?;
        scalar(&mut wtr, m, "converged", u8::from(svm.converged).to_string())?;
        for (sv, coef) in svm.support_vectors.outer_iter().zip(&svm.coef) {
            let mut rec = vec![m.to_string(), "sv".into(), coef.to_string()];
            rec.extend(sv.iter().map(f64::to_string));
            csvio::write_row(&mut wtr, &rec)?;
        }
    }
    csvio::finish(wtr)
}

#[derive(Default)]
struct MachineRows {
    gamma: Option<f64>,
    c_reg: Option<f64>,
    bias: Option<f64>,
    converged: Option<bool>,
    svs: Vec<Vec<f64>>,
    coef: Vec<f64>,
}

pub fn read_meta_model<R: Read>(input: R) -> Result<MetaModel, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let class_col = header.require("class")?;
    let kind_col = header.require("kind")?;
    let value_col = header.require("value")?;
    let x_cols = header.numbered("x_");
    let mut classes = None;
    let mut machines: Vec<MachineRows> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let line = csvio::line_of(&record);
        let m: usize = csvio::parse_field(&record, class_col, "class")?;
        let kind = csvio::field(&record, kind_col, "kind")?;
        let invalid = |column: &str, value: &str| IngestError::InvalidValue {
            line,
            column: column.to_owned(),
            value: value.to_owned(),
        };
        if kind == "classes" {
            classes = Some(csvio::parse_field::<usize>(&record, value_col, "value")?);
            continue;
        }
        if m > machines.len() {
            return Err(invalid("class", &m.to_string()));
        }
        if m == machines.len() {
            machines.push(MachineRows::default());
        }
        let rows = &mut machines[m];
        let value = || csvio::parse_f64(&record, value_col, "value");
        match kind {
            "gamma" => rows.gamma = Some(value()?),
            "c_reg" => rows.c_reg = Some(value()?),
            "bias" => rows.bias = Some(value()?),
            "converged" => rows.converged = Some(value()? != 0.0),
            "sv" => {
                rows.coef.push(value()?);
                rows.svs.push(
                    x_cols
                        .iter()
                        .enumerate()
                        .map(|(d, &col)| csvio::parse_f64(&record, col, &format!("x_{d}")))
                        .collect::<Result<_, _>>()?,
                );
            }
            other => return Err(invalid("kind", other)),
        }
    }
    let classes = classes.ok_or_else(|| IngestError::MissingColumn("classes".into()))?;
    let dim = x_cols.len();
    let machines = machines
        .into_iter()
        .map(|r| {
            let missing = |k: &str| IngestError::MissingColumn(k.to_owned());
            Ok(SvmModel {
                support_vectors: Array2::from_shape_fn((r.svs.len(), dim), |(i, d)| r.svs[i][d]),
                coef: r.coef,
                bias: r.bias.ok_or_else(|| missing("bias"))?,
                gamma: r.gamma.ok_or_else(|| missing("gamma"))?,
                c_reg: r.c_reg.ok_or_else(|| missing("c_reg"))?,
                converged: r.converged.ok_or_else(|| missing("converged"))?,
                kkt_gap: f64::NAN,
                iterations: 0,
            })
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    MetaModel::new(classes, machines).map_err(|e| IngestError::ShapeMismatch(e.to_string()))
}

pub fn load_meta_model(path: &Path) -> Result<MetaModel, IngestError> {
    read_meta_model(csvio::open(path)?).map_err(|e| e.at_path(path))
}

/// One-hot rows of the meta prediction for each sample.
pub fn one_hot(predicted: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((predicted.len(), classes));
    for (s, &c) in predicted.iter().enumerate() {
        out[[s, c]] = 1.0;
    }
    out
}
