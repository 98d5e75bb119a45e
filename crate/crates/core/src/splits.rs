//! Group-atomic, class-stratified k-fold assignment.
//!
//! Groups (lesions) are placed whole. They are visited largest first, with
//! equal sizes ordered by a seeded shuffle, and each one goes to the fold
//! whose class histogram moves closest, in squared error, to the global
//! histogram divided by `k`. Ties prefer the fold holding fewer samples and
//! then the lowest fold index, so an empty fold is always filled before a
//! non-empty one can tie with it.
//!
//! Only primary-dataset samples are assigned folds. Secondary samples can be
//! appended to every training split but never enter validation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::csvio::{self, Header};
use crate::ingest::{DatasetTag, IngestError, SampleManifest};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("{groups} groups cannot fill {k} folds")]
    TooFewGroups { groups: usize, k: usize },
    #[error("fold {fold} out of range for k = {k}")]
    FoldOutOfRange { fold: usize, k: usize },
}

/// What to do with secondary-dataset samples when forming a training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondaryPolicy {
    Exclude,
    #[default]
    AddToTrain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    seed: Option<u64>,
    /// Primary samples in manifest order with their fold.
    primary: Vec<(String, usize)>,
    secondary: Vec<String>,
    index: HashMap<String, usize>,
}

impl FoldAssignment {
    fn from_parts(
        k: usize,
        seed: Option<u64>,
        primary: Vec<(String, usize)>,
        secondary: Vec<String>,
    ) -> Self {
        let index = primary
            .iter()
            .map(|(id, f)| (id.clone(), *f))
            .collect::<HashMap<_, _>>();
        Self {
            k,
            seed,
            primary,
            secondary,
            index,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Seed the assignment was generated with; `None` when read from a file.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn primary(&self) -> &[(String, usize)] {
        &self.primary
    }

    pub fn secondary(&self) -> &[String] {
        &self.secondary
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for (_, f) in &self.primary {
            sizes[*f] += 1;
        }
        sizes
    }
}

struct Group {
    hist: Vec<f64>,
    members: Vec<usize>,
}

pub fn stratified_group_kfold(
    manifest: &SampleManifest,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, SplitError> {
    if k < 2 {
        return Err(SplitError::InvalidK(k));
    }
    let classes = manifest.class_count();
    let mut groups: Vec<Group> = Vec::new();
    let mut group_pos: HashMap<&str, usize> = HashMap::new();
    let mut secondary = Vec::new();
    for (i, s) in manifest.samples().iter().enumerate() {
        if s.dataset == DatasetTag::Secondary {
            secondary.push(s.sample_id.clone());
            continue;
        }
        let g = *group_pos.entry(s.group_id.as_str()).or_insert_with(|| {
            groups.push(Group {
                hist: vec![0.0; classes],
                members: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].hist[s.label] += 1.0;
        groups[g].members.push(i);
    }
    if groups.len() < k {
        return Err(SplitError::TooFewGroups {
            groups: groups.len(),
            k,
        });
    }

    let mut target = vec![0.0; classes];
    for g in &groups {
        for (t, h) in target.iter_mut().zip(&g.hist) {
            *t += h;
        }
    }
    for t in &mut target {
        *t /= k as f64;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.members.len()));

    let mut fold_hist = vec![vec![0.0; classes]; k];
    let mut fold_size = vec![0usize; k];
    let mut fold_of = vec![usize::MAX; manifest.len()];
    for g in &groups {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for f in 0..k {
            let cost: f64 = g
                .hist
                .iter()
                .zip(&fold_hist[f])
                .zip(&target)
                .filter(|((&gc, _), _)| gc > 0.0)
                .map(|((&gc, &fc), &tc)| gc * (2.0 * (fc - tc) + gc))
                .sum();
            let better = cost < best_cost
                || (cost == best_cost && fold_size[f] < fold_size[best]);
            if better {
                best = f;
                best_cost = cost;
            }
        }
        for (fc, gc) in fold_hist[best].iter_mut().zip(&g.hist) {
            *fc += gc;
        }
        fold_size[best] += g.members.len();
        for &i in &g.members {
            fold_of[i] = best;
        }
    }

    let primary = manifest
        .samples()
        .iter()
        .zip(&fold_of)
        .filter(|(s, _)| s.dataset == DatasetTag::Primary)
        .map(|(s, &f)| (s.sample_id.clone(), f))
        .collect();
    Ok(FoldAssignment::from_parts(k, Some(seed), primary, secondary))
}

/// `(train ids, validation ids)` for one fold.
pub fn fold_split(
    assignment: &FoldAssignment,
    fold: usize,
    secondary_policy: SecondaryPolicy,
) -> Result<(Vec<String>, Vec<String>), SplitError> {
    if fold >= assignment.k {
        return Err(SplitError::FoldOutOfRange {
            fold,
            k: assignment.k,
        });
    }
    let (validation, mut train): (Vec<_>, Vec<_>) =
        assignment.primary.iter().partition(|(_, f)| *f == fold);
    let validation: Vec<String> = validation.into_iter().map(|(id, _)| id.clone()).collect();
    let mut train: Vec<String> = train.drain(..).map(|(id, _)| id.clone()).collect();
    if secondary_policy == SecondaryPolicy::AddToTrain {
        train.extend(assignment.secondary.iter().cloned());
    }
    Ok((train, validation))
}

pub fn write_folds<W: Write>(assignment: &FoldAssignment, output: W) -> Result<(), IngestError> {
    let mut wtr = csvio::writer(output);
    csvio::write_row(&mut wtr, ["sample_id", "fold"])?;
    for (id, f) in &assignment.primary {
        csvio::write_row(&mut wtr, [id.as_str(), &f.to_string()])?;
    }
    csvio::finish(wtr)
}

pub fn save_folds(path: &Path, assignment: &FoldAssignment) -> Result<(), IngestError> {
    csvio::write_atomic(path, |w| write_folds(assignment, w))
}

/// Reads `folds.csv` back against its manifest. `k` is recovered as the
/// number of distinct folds, which must be `0..k` with none empty.
pub fn read_folds<R: Read>(
    input: R,
    manifest: &SampleManifest,
) -> Result<FoldAssignment, IngestError> {
    let mut rdr = csvio::reader(input);
    let header = Header::read(&mut rdr)?;
    let id_col = header.require("sample_id")?;
    let fold_col = header.require("fold")?;
    let mut fold_of: Vec<Option<usize>> = vec![None; manifest.len()];
    for record in rdr.records() {
        let record = record.map_err(IngestError::from_csv)?;
        let line = csvio::line_of(&record);
        let id = csvio::field(&record, id_col, "sample_id")?;
        let fold: usize = csvio::parse_field(&record, fold_col, "fold")?;
        let i = manifest
            .position(id)
            .ok_or_else(|| IngestError::UnknownSampleId(id.to_owned()))?;
        if manifest.samples()[i].dataset == DatasetTag::Secondary {
            return Err(IngestError::InvalidValue {
                line,
                column: "sample_id".into(),
                value: format!("{id} (secondary samples carry no fold)"),
            });
        }
        if fold_of[i].replace(fold).is_some() {
            return Err(IngestError::DuplicateSampleId(id.to_owned()));
        }
    }

    let mut primary = Vec::new();
    let mut secondary = Vec::new();
    for (s, f) in manifest.samples().iter().zip(&fold_of) {
        match (s.dataset, f) {
            (DatasetTag::Secondary, _) => secondary.push(s.sample_id.clone()),
            (DatasetTag::Primary, Some(f)) => primary.push((s.sample_id.clone(), *f)),
            (DatasetTag::Primary, None) => {
                return Err(IngestError::MissingSample {
                    model_id: "folds".into(),
                    sample_id: s.sample_id.clone(),
                })
            }
        }
    }
    let k = primary.iter().map(|(_, f)| f + 1).max().unwrap_or(0);
    let mut used = vec![false; k];
    for (_, f) in &primary {
        used[*f] = true;
    }
    if k < 2 || used.contains(&false) {
        return Err(IngestError::InvalidValue {
            line: 0,
            column: "fold".into(),
            value: format!("folds must be 0..k with k >= 2 and none empty (k = {k})"),
        });
    }
    Ok(FoldAssignment::from_parts(k, None, primary, secondary))
}

pub fn load_folds(path: &Path, manifest: &SampleManifest) -> Result<FoldAssignment, IngestError> {
    read_folds(csvio::open(path)?, manifest).map_err(|e| e.at_path(path))
}
