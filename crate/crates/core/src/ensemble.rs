//! Weighted combination of model predictions, exhaustive subset search and
//! the final full-plus-fold prediction.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::csvio::{self, Header};
use crate::ingest::IngestError;
use crate::meta::{flatten_samples, one_hot, MetaError, MetaModel};
use crate::metrics::{argmax, confusion_matrix, wacc, MetricsError};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("member {index} has non-positive weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("unknown combination rule `{0}`")]
    UnknownRule(String),
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rule {
    #[default]
    Average,
    Vote,
}

impl FromStr for Rule {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Rule::Average),
            "vote" => Ok(Rule::Vote),
            other => Err(EnsembleError::UnknownRule(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Full,
    Cv,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Full => "full",
            ModelKind::Cv => "cv",
        }
    }
}

impl FromStr for ModelKind {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ModelKind::Full),
            "cv" => Ok(ModelKind::Cv),
            other => Err(EnsembleError::UnknownKind(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub model_id: String,
    pub weight: f64,
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<Member>,
    rule: Rule,
}

impl EnsembleSpec {
    pub fn new(members: Vec<Member>, rule: Rule) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::EmptyEnsemble);
        }
        check_weights(members.iter().map(|m| m.weight))?;
        Ok(Self { members, rule })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn ids_of(&self, kind: ModelKind) -> Vec<&str> {
        self.members
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| m.model_id.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        csvio::write_atomic(path, |w| write_ensemble(self, w))
    }
}

fn check_weights(weights: impl Iterator<Item = f64>) -> Result<(), EnsembleError> {
    for (index, weight) in weights.enumerate() {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(EnsembleError::InvalidWeight { index, weight });
        }
    }
    Ok(())
}

fn check_combine(preds: &ArrayView3<'_, f64>, weights: &[f64]) -> Result<(), EnsembleError> {
    if preds.len_of(Axis(0)) == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    if weights.len() != preds.len_of(Axis(0)) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "{} weights for {} models",
            weights.len(),
            preds.len_of(Axis(0))
        )));
    }
    check_weights(weights.iter().copied())
}

/// `sum_m w_m P_m / sum_m w_m` over an `M x S x C` stack.
///
/// ```
/// use imbalkit::ensemble::combine_average;
/// use ndarray::array;
/// let p = array![[[1.0, 0.0]], [[0.0, 1.0]]];
/// let out = combine_average(p.view(), &[5.0, 1.0]).unwrap();
/// assert!((out[[0, 0]] - 5.0 / 6.0).abs() < 1e-15);
/// ```
pub fn combine_average(preds: ArrayView3<'_, f64>, weights: &[f64]) -> Result<Array2<f64>, EnsembleError> {
    check_combine(&preds, weights)?;
    let total: f64 = weights.iter().sum();
    let (_, s, c) = preds.dim();
    let mut out = Array2::zeros((s, c));
    for (p, &w) in preds.outer_iter().zip(weights) {
        out.scaled_add(w, &p);
    }
    out /= total;
    Ok(out)
}

/// One-hot of the class with the most weighted votes; each model votes for
/// its argmax. Ties go to the lowest class.
pub fn combine_vote(preds: ArrayView3<'_, f64>, weights: &[f64]) -> Result<Array2<f64>, EnsembleError> {
    check_combine(&preds, weights)?;
    let (_, s, c) = preds.dim();
    let mut votes = Array2::<f64>::zeros((s, c));
    for (p, &w) in preds.outer_iter().zip(weights) {
        for (i, row) in p.outer_iter().enumerate() {
            votes[[i, argmax(row.iter().copied())]] += w;
        }
    }
    let winners: Vec<usize> = votes.outer_iter().map(|r| argmax(r.iter().copied())).collect();
    Ok(one_hot(&winners, c))
}

pub fn combine(rule: Rule, preds: ArrayView3<'_, f64>, weights: &[f64]) -> Result<Array2<f64>, EnsembleError> {
    match rule {
        Rule::Average => combine_average(preds, weights),
        Rule::Vote => combine_vote(preds, weights),
    }
}

fn wacc_of(scores: ArrayView2<'_, f64>, truth: &[usize]) -> Result<f64, EnsembleError> {
    let predicted: Vec<usize> = scores.outer_iter().map(|r| argmax(r.iter().copied())).collect();
    Ok(wacc(&confusion_matrix(truth, &predicted, scores.ncols())?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Chosen model indices, ascending.
    pub members: Vec<usize>,
    pub wacc: f64,
    /// Model indices ordered by individual WACC, best first.
    pub ranking: Vec<usize>,
    pub individual_wacc: Vec<f64>,
    /// Number of subsets scored.
    pub evaluated: u64,
}

const SCALE: f64 = 4_294_967_296.0;
const CHUNK_BITS: u32 = 9;

struct Scorer<'a> {
    /// Per candidate, `S x C` integer contributions.
    parts: Vec<Array2<i64>>,
    truth: &'a [usize],
    class_sizes: Vec<u64>,
}

impl Scorer<'_> {
    fn wacc(&self, sums: &Array2<i64>, hits: &mut [u64]) -> f64 {
        hits.fill(0);
        for (row, &t) in sums.outer_iter().zip(self.truth) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == t {
                hits[t] += 1;
            }
        }
        // summed in class order, as `metrics::wacc` does
        let recall_sum: f64 = hits
            .iter()
            .zip(&self.class_sizes)
            .map(|(&h, &n)| h as f64 / n as f64)
            .sum();
        recall_sum / hits.len() as f64
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    mask: u64,
    wacc: f64,
}

/// Orders candidates best first: higher WACC, then fewer members, then the
/// lexicographically smaller list of model indices.
fn better(a: &Candidate, b: &Candidate, ranking: &[usize]) -> Ordering {
    b.wacc
        .total_cmp(&a.wacc)
        .then_with(|| a.mask.count_ones().cmp(&b.mask.count_ones()))
        .then_with(|| members_of(a.mask, ranking).cmp(&members_of(b.mask, ranking)))
}

fn members_of(mask: u64, ranking: &[usize]) -> Vec<usize> {
    let mut m: Vec<usize> = (0..ranking.len())
        .filter(|&b| mask >> b & 1 == 1)
        .map(|b| ranking[b])
        .collect();
    m.sort_unstable();
    m
}

/// Ranks the `M` crop-averaged models by WACC and scores every non-empty
/// subset of the best `min(top_k, M)` under `rule` with unit weights.
///
/// Subsets are enumerated in Gray-code order over fixed-size chunks, so each
/// step adds or removes one model from running integer sums (probabilities
/// in 32-bit fixed point, or vote counts). Chunks run in parallel and the
/// reduction is a total order, so the result does not depend on the thread
/// count.
pub fn subset_search(
    preds: ArrayView3<'_, f64>,
    truth: &[usize],
    top_k: usize,
    rule: Rule,
) -> Result<SearchResult, EnsembleError> {
    let (m, s, c) = preds.dim();
    if m == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    if truth.len() != s {
        return Err(EnsembleError::ShapeMismatch(format!("{} labels for {s} samples", truth.len())));
    }
    if top_k == 0 {
        return Err(EnsembleError::ShapeMismatch("top_k must be positive".into()));
    }
    let individual_wacc = preds
        .outer_iter()
        .map(|p| wacc_of(p, truth))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| individual_wacc[b].total_cmp(&individual_wacc[a]));
    let k = top_k.min(m);
    if k > 62 {
        return Err(EnsembleError::ShapeMismatch(format!("cannot enumerate 2^{k} subsets")));
    }
    ranking.truncate(k);

    let mut class_sizes = vec![0u64; c];
    for &t in truth {
        class_sizes[t] += 1;
    }
    let parts = ranking
        .iter()
        .map(|&idx| {
            let p = preds.index_axis(Axis(0), idx);
            match rule {
                Rule::Average => p.mapv(|v| (v * SCALE).round() as i64),
                Rule::Vote => {
                    let mut onehot = Array2::zeros((s, c));
                    for (i, row) in p.outer_iter().enumerate() {
                        onehot[[i, argmax(row.iter().copied())]] = 1;
                    }
                    onehot
                }
            }
        })
        .collect();
    let scorer = Scorer {
        parts,
        truth,
        class_sizes,
    };

    let total: u64 = (1u64 << k) - 1;
    let chunk = 1u64 << CHUNK_BITS.min(k as u32);
    let chunks = (total + 1).div_ceil(chunk);
    let results: Vec<(Option<Candidate>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let start = (ci * chunk).max(1);
            let end = ((ci + 1) * chunk).min(total + 1);
            let mut hits = vec![0u64; c];
            let mut gray = start ^ (start >> 1);
            let mut sums = Array2::<i64>::zeros((s, c));
            for b in 0..k {
                if gray >> b & 1 == 1 {
                    sums += &scorer.parts[b];
                }
            }
            let mut best: Option<Candidate> = None;
            let mut count = 0;
            for i in start..end {
                if i > start {
                    let bit = i.trailing_zeros() as usize;
                    gray ^= 1 << bit;
                    if gray >> bit & 1 == 1 {
                        sums += &scorer.parts[bit];
                    } else {
                        sums -= &scorer.parts[bit];
                    }
                }
                let cand = Candidate {
                    mask: gray,
                    wacc: scorer.wacc(&sums, &mut hits),
                };
                count += 1;
                if best.as_ref().map_or(true, |b| better(&cand, b, &ranking).is_lt()) {
                    best = Some(cand);
                }
            }
            (best, count)
        })
        .collect();

    let evaluated = results.iter().map(|r| r.1).sum();
    let best = results
        .into_iter()
        .filter_map(|r| r.0)
        .min_by(|a, b| better(a, b, &ranking))
        .expect("at least one subset");
    Ok(SearchResult {
        members: members_of(best.mask, &ranking),
        wacc: best.wacc,
        ranking,
        individual_wacc,
        evaluated,
    })
}

/// Combines `N_F` full models, weighted `full_weight`, with `N_CV` fold
/// models, weighted 1, into `S x C` probabilities.
///
/// Full models are averaged over crops. Fold models are averaged over crops
/// too, or, given a meta model, replaced by one-hot meta predictions from
/// their flattened crops.
pub fn final_predict(
    full: ArrayView4<'_, f64>,
    cv: ArrayView4<'_, f64>,
    meta: Option<&MetaModel>,
    full_weight: f64,
) -> Result<Array2<f64>, EnsembleError> {
    let (nf, sf, _, cf) = full.dim();
    let (ncv, s, r, c) = cv.dim();
    if nf + ncv == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    if nf > 0 && ncv > 0 && (sf, cf) != (s, c) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "full models score {sf} samples x {cf} classes, fold models {s} x {c}"
        )));
    }
    let (s, c) = if ncv > 0 { (s, c) } else { (sf, cf) };
    if nf > 0 {
        check_weights(std::iter::once(full_weight))?;
    }
    if let Some(meta) = meta {
        if ncv > 0 && (meta.feature_dim() != r * c || meta.classes() != c) {
            return Err(EnsembleError::ShapeMismatch(format!(
                "meta model expects {} features over {} classes, fold models give {} x {c}",
                meta.feature_dim(),
                meta.classes(),
                r
            )));
        }
    }
    let mut stack = Array3::zeros((nf + ncv, s, c));
    for (m, model) in full.outer_iter().enumerate() {
        stack.index_axis_mut(Axis(0), m).assign(&model.mean_axis(Axis(1)).expect("crops"));
    }
    for (m, model) in cv.outer_iter().enumerate() {
        let out = match meta {
            Some(meta) => one_hot(&meta.predict_batch(flatten_samples(model).view())?, c),
            None => model.mean_axis(Axis(1)).expect("crops"),
        };
        stack.index_axis_mut(Axis(0), nf + m).assign(&out);
    }
    let weights: Vec<f64> = std::iter::repeat(full_weight)
        .take(nf)
        .chain(std::iter::repeat(1.0).take(ncv))
        .collect();
    combine_average(stack.view(), &weights)
}

pub fn write_ensemble<W: Write>(spec: &EnsembleSpec, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["model_id", "weight", "kind"])?;
    for m in &spec.members {
        csvio::write_row(
            &mut wtr,
            [m.model_id.as_str(), &csvio::format_sig9(m.weight), m.kind.as_str()],
        )?;
    }
    csvio::finish(wtr)
}

pub fn read_ensemble<R: Read>(input: R, rule: Rule) -> Result<EnsembleSpec, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let id_col = header.require("model_id")?;
    let weight_col = header.require("weight")?;
    let kind_col = header.require("kind")?;
    let mut members = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let kind: ModelKind = csvio::parse_field(&record, kind_col, "kind")?;
        let weight = csvio::parse_f64(&record, weight_col, "weight")?;
        if weight <= 0.0 {
            return Err(IngestError::InvalidValue {
                line: csvio::line_of(&record),
                column: "weight".into(),
                value: weight.to_string(),
            });
        }
        members.push(Member {
            model_id: csvio::field(&record, id_col, "model_id")?.to_owned(),
            weight,
            kind,
        });
    }
    EnsembleSpec::new(members, rule).map_err(|_| IngestError::EmptyTable)
}

pub fn load_ensemble(path: &Path, rule: Rule) -> Result<EnsembleSpec, IngestError> {
    read_ensemble(csvio::open(path)?, rule).map_err(|e| e.at_path(path))
}

/// `sample_id,p_0,...,p_{C-1},argmax`.
pub fn write_final_predictions<W: Write, S: AsRef<str>>(
    sample_ids: &[S],
    probs: ArrayView2<'_, f64>,
    output: W,
) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    let mut header = vec!["sample_id".to_owned()];
    header.extend((0..probs.ncols()).map(|c| format!("p_{c}")));
    header.push("argmax".into());
    csvio::write_row(&mut wtr, &header)?;
    for (id, row) in sample_ids.iter().zip(probs.outer_iter()) {
        let mut rec = vec![id.as_ref().to_owned()];
        rec.extend(row.iter().map(|&v| csvio::format_sig9(v)));
        rec.push(argmax(row.iter().copied()).to_string());
        csvio::write_row(&mut wtr, &rec)?;
    }
    csvio::finish(wtr)
}

pub fn save_final_predictions<S: AsRef<str>>(
    path: &Path,
    sample_ids: &[S],
    probs: ArrayView2<'_, f64>,
) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_final_predictions(sample_ids, probs, w))
}

/// Returns sample ids in file order with their probability rows.
pub fn read_final_predictions<R: Read>(input: R) -> Result<(Vec<String>, Array2<f64>), IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let id_col = header.require("sample_id")?;
    let p_cols = header.numbered("p_");
    if p_cols.is_empty() {
        return Err(IngestError::MissingColumn("p_0".into()));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        ids.push(csvio::field(&record, id_col, "sample_id")?.to_owned());
        for (c, &col) in p_cols.iter().enumerate() {
            values.push(csvio::parse_f64(&record, col, &format!("p_{c}"))?);
        }
    }
    if ids.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let probs = Array2::from_shape_vec((ids.len(), p_cols.len()), values)
        .map_err(|e| IngestError::ShapeMismatch(e.to_string()))?;
    Ok((ids, probs))
}

pub fn load_final_predictions(path: &Path) -> Result<(Vec<String>, Array2<f64>), IngestError> {
    read_final_predictions(csvio::open(path)?).map_err(|e| e.at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{meta_fit, SvmParams};
    use ndarray::{array, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(m: usize, s: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array3::from_shape_fn((m, s, c), |_| rng.gen::<f64>() + 1e-3);
        for mut row in p.lanes_mut(Axis(2)) {
            let sum = row.sum();
            row /= sum;
        }
        p
    }

    #[test]
    fn average_examples() {
        let p = random_stack(1, 4, 3, 0);
        assert_eq!(combine_average(p.view(), &[2.0]).unwrap(), p.index_axis(Axis(0), 0));
        let two = ndarray::stack![Axis(0), p.index_axis(Axis(0), 0), p.index_axis(Axis(0), 0)];
        let out = combine_average(two.view(), &[1.0, 1.0]).unwrap();
        assert!(out.iter().zip(p.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        let empty = Array3::<f64>::zeros((0, 2, 2));
        assert_eq!(combine_average(empty.view(), &[]), Err(EnsembleError::EmptyEnsemble));
    }

    #[test]
    fn vote_examples() {
        let p = array![[[0.9, 0.1]], [[0.8, 0.2]], [[0.3, 0.7]]];
        assert_eq!(combine_vote(p.view(), &[1.0; 3]).unwrap(), array![[1.0, 0.0]]);
        let tie = array![[[0.9, 0.1]], [[0.3, 0.7]]];
        assert_eq!(combine_vote(tie.view(), &[1.0; 2]).unwrap(), array![[1.0, 0.0]]);
        let agree = array![[[0.1, 0.9]], [[0.3, 0.7]]];
        assert_eq!(combine_vote(agree.view(), &[1.0; 2]).unwrap(), array![[0.0, 1.0]]);
    }

    proptest! {
        #[test]
        fn average_is_stochastic_and_scale_free(seed in any::<u64>(), m in 1usize..6, scale in 0.01f64..100.0) {
            let p = random_stack(m, 5, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..5.0)).collect();
            let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
            let a = combine_average(p.view(), &w).unwrap();
            let b = combine_average(p.view(), &ws).unwrap();
            for row in a.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    fn brute_force(preds: ArrayView3<'_, f64>, truth: &[usize], rule: Rule) -> (Vec<usize>, f64) {
        let m = preds.len_of(Axis(0));
        let mut best: Option<(Vec<usize>, f64)> = None;
        for mask in 1u32..(1 << m) {
            let members: Vec<usize> = (0..m).filter(|b| mask >> b & 1 == 1).collect();
            let sub = preds.select(Axis(0), &members);
            let out = combine(rule, sub.view(), &vec![1.0; members.len()]).unwrap();
            let w = wacc_of(out.view(), truth).unwrap();
            let replace = match &best {
                None => true,
                Some((bm, bw)) => {
                    w > *bw || (w == *bw && (members.len() < bm.len() || (members.len() == bm.len() && members < *bm)))
                }
            };
            if replace {
                best = Some((members, w));
            }
        }
        best.unwrap()
    }

    fn labels(s: usize, c: usize) -> Vec<usize> {
        (0..s).map(|i| i % c).collect()
    }

    #[test]
    fn single_model() {
        let p = random_stack(1, 6, 3, 1);
        let r = subset_search(p.view(), &labels(6, 3), 15, Rule::Average).unwrap();
        assert_eq!(r.members, vec![0]);
        assert_eq!(r.evaluated, 1);
    }

    #[test]
    fn complementary_pair_beats_noise() {
        // A is right on classes 0 and 1, B on 2 and 3 with confident
        // predictions; C is uniform noise
        let s = 40;
        let c = 4;
        let truth = labels(s, c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Array3::zeros((3, s, c));
        for (i, &t) in truth.iter().enumerate() {
            for (m, good) in [(0usize, t < 2), (1, t >= 2)] {
                let wrong = (t + 1) % c;
                let (hot, level) = if good { (t, 0.7) } else { (wrong, 0.4) };
                for k in 0..c {
                    p[[m, i, k]] = if k == hot { level } else { (1.0 - level) / 3.0 };
                }
            }
            let mut noise: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
            let sum: f64 = noise.iter().sum();
            noise.iter_mut().for_each(|v| *v /= sum);
            for k in 0..c {
                p[[2, i, k]] = noise[k];
            }
        }
        let (oracle, oracle_w) = brute_force(p.view(), &truth, Rule::Average);
        assert_eq!(oracle, vec![0, 1]);
        let r = subset_search(p.view(), &truth, 15, Rule::Average).unwrap();
        assert_eq!(r.members, oracle);
        assert_eq!(r.wacc, oracle_w);
        assert_eq!(r.evaluated, 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn search_matches_brute_force(seed in any::<u64>(), m in 1usize..8, vote in any::<bool>()) {
            let rule = if vote { Rule::Vote } else { Rule::Average };
            let p = random_stack(m, 30, 3, seed);
            let truth = labels(30, 3);
            let (oracle, w) = brute_force(p.view(), &truth, rule);
            let r = subset_search(p.view(), &truth, m, rule).unwrap();
            prop_assert_eq!(r.members, oracle);
            prop_assert_eq!(r.wacc, w);
            prop_assert!(r.individual_wacc.iter().all(|&iw| r.wacc >= iw));
        }
    }

    #[test]
    fn top_k_limits_enumeration() {
        let p = random_stack(12, 20, 3, 2);
        let truth = labels(20, 3);
        let r = subset_search(p.view(), &truth, 10, Rule::Average).unwrap();
        assert_eq!(r.evaluated, 1023);
        assert_eq!(r.ranking.len(), 10);
        assert!(r.members.iter().all(|m| r.ranking.contains(m)));
        let w = &r.individual_wacc;
        assert!(r.ranking.windows(2).all(|p| w[p[0]] >= w[p[1]]));
    }

    #[test]
    fn final_predict_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cv = Array4::from_shape_fn((3, 5, 4, 2), |_| rng.gen::<f64>());
        for mut row in cv.lanes_mut(Axis(3)) {
            let sum = row.sum();
            row /= sum;
        }
        let none = Array4::<f64>::zeros((0, 5, 4, 2));
        let out = final_predict(none.view(), cv.view(), None, 5.0).unwrap();
        let expected = cv.mean_axis(Axis(2)).unwrap().mean_axis(Axis(0)).unwrap();
        assert!(out.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let row = array![0.3, 0.7];
        let same = Array4::from_shape_fn((5, 5, 4, 2), |(_, _, _, c)| row[c]);
        let full = Array4::from_shape_fn((1, 5, 4, 2), |(_, _, _, c)| row[c]);
        let out = final_predict(full.view(), same.view(), None, 5.0).unwrap();
        assert!(out.outer_iter().all(|r| (r[0] - 0.3).abs() < 1e-12));

        // one full model at (1,0) against five fold models at (0,1)
        let full = Array4::from_shape_fn((1, 1, 1, 2), |(_, _, _, c)| if c == 0 { 1.0 } else { 0.0 });
        let folds = Array4::from_shape_fn((5, 1, 1, 2), |(_, _, _, c)| if c == 1 { 1.0 } else { 0.0 });
        let out = final_predict(full.view(), folds.view(), None, 5.0).unwrap();
        assert!((out[[0, 0]] - 0.5).abs() < 1e-15);

        let short = Array4::<f64>::zeros((1, 4, 4, 2));
        assert!(matches!(
            final_predict(short.view(), cv.view(), None, 5.0),
            Err(EnsembleError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn final_predict_with_meta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = labels(12, 2);
        let mut cv = Array4::zeros((2, 12, 3, 2));
        for m in 0..2 {
            for (s, &l) in labels.iter().enumerate() {
                for r in 0..3 {
                    let p = 0.6 + 0.3 * rng.gen::<f64>();
                    cv[[m, s, r, l]] = p;
                    cv[[m, s, r, 1 - l]] = 1.0 - p;
                }
            }
        }
        let flat = flatten_samples(cv.index_axis(Axis(0), 0));
        let meta = meta_fit(flat.view(), &labels, 2, &SvmParams::default()).unwrap();
        let none = Array4::<f64>::zeros((0, 12, 3, 2));
        let out = final_predict(none.view(), cv.view(), Some(&meta), 5.0).unwrap();
        for (row, &l) in out.outer_iter().zip(&labels) {
            assert_eq!(row[l], 1.0);
        }
    }

    #[test]
    fn files() {
        let spec = EnsembleSpec::new(
            vec![
                Member { model_id: "a".into(), weight: 5.0, kind: ModelKind::Full },
                Member { model_id: "b".into(), weight: 1.0, kind: ModelKind::Cv },
            ],
            Rule::Average,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ensemble(&spec, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "model_id,weight,kind\na,5,full\nb,1,cv\n");
        assert_eq!(read_ensemble(buf.as_slice(), Rule::Average).unwrap(), spec);

        let probs = array![[0.25, 0.75], [0.5, 0.5]];
        let mut buf = Vec::new();
        write_final_predictions(&["x", "y"], probs.view(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "sample_id,p_0,p_1,argmax\nx,0.25,0.75,1\ny,0.5,0.5,0\n"
        );
        let (ids, back) = read_final_predictions(buf.as_slice()).unwrap();
        assert_eq!(ids, vec!["x", "y"]);
        assert_eq!(back, probs);
    }
}
