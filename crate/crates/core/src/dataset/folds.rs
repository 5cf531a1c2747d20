use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::Manifest;
use crate::label::{Label, NUM_CLASSES};

pub const NUM_FOLDS: usize = 5;
pub const FOLDPLAN_HEADER: &str = "mslfolds/1";

/// Target image shares for train / val / test.
const SHARES: [f64; 3] = [0.7, 0.2, 0.1];
const MIN_PATIENTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FoldError {
    #[error("need at least {MIN_PATIENTS} patients, found {0}")]
    InsufficientPatients(usize),
    #[error("class {0} has images but no patient whose majority class it is")]
    EmptyClass(Label),
    #[error("fold plan line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("fold plan invalid: {0}")]
    Invalid(String),
}

impl FoldError {
    pub fn code(&self) -> &'static str {
        match self {
            FoldError::InsufficientPatients(_) => "InsufficientPatients",
            FoldError::EmptyClass(_) => "EmptyClass",
            FoldError::Parse { .. } => "FoldPlanParse",
            FoldError::Invalid(_) => "FoldPlanInvalid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Patient-level assignment for one fold.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fold {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Fold {
    pub fn partition(&self, p: Partition) -> &BTreeSet<String> {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    fn partition_mut(&mut self, p: Partition) -> &mut BTreeSet<String> {
        match p {
            Partition::Train => &mut self.train,
            Partition::Val => &mut self.val,
            Partition::Test => &mut self.test,
        }
    }

    pub fn partition_of(&self, patient: &str) -> Option<Partition> {
        Partition::ALL
            .into_iter()
            .find(|&p| self.partition(p).contains(patient))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Class a patient is stratified under: the label of most of their images,
/// ties going to the lower class index.
fn patient_classes(m: &Manifest) -> BTreeMap<&str, (Label, usize)> {
    let mut per_patient: BTreeMap<&str, [usize; NUM_CLASSES]> = BTreeMap::new();
    for r in &m.records {
        per_patient.entry(&r.patient_id).or_default()[r.label.index()] += 1;
    }
    per_patient
        .into_iter()
        .map(|(p, counts)| {
            let mut best = 0;
            for i in 1..NUM_CLASSES {
                if counts[i] > counts[best] {
                    best = i;
                }
            }
            (p, (Label::ALL[best], counts.iter().sum()))
        })
        .collect()
}

/// Five independently seeded 70:20:10 patient-level splits.
///
/// Fold `f` shuffles each class's patients with a ChaCha8 stream seeded by
/// `seed + f`, stably sorts them by image count (largest first), then assigns
/// each to the partition with the largest remaining image deficit against its
/// 70:20:10 target (ties: train, val, test).
pub fn make_folds(m: &Manifest, seed: u64) -> Result<FoldPlan, FoldError> {
    let classes = patient_classes(m);
    if classes.len() < MIN_PATIENTS {
        return Err(FoldError::InsufficientPatients(classes.len()));
    }
    let mut by_class: [Vec<(&str, usize)>; NUM_CLASSES] = Default::default();
    for (&p, &(label, n)) in &classes {
        by_class[label.index()].push((p, n));
    }
    let present = m.class_counts();
    for label in Label::ALL {
        if present[label.index()] > 0 && by_class[label.index()].is_empty() {
            return Err(FoldError::EmptyClass(label));
        }
    }

    let folds = (0..NUM_FOLDS)
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(f as u64));
            let mut fold = Fold::default();
            for patients in &by_class {
                let mut order = patients.clone();
                order.shuffle(&mut rng);
                order.sort_by_key(|b| std::cmp::Reverse(b.1));
                let total: usize = order.iter().map(|p| p.1).sum();
                let mut filled = [0usize; 3];
                for (patient, n) in order {
                    let mut pick = 0;
                    let mut best = f64::NEG_INFINITY;
                    for (k, share) in SHARES.iter().enumerate() {
                        let deficit = share * total as f64 - filled[k] as f64;
                        if deficit > best {
                            best = deficit;
                            pick = k;
                        }
                    }
                    filled[pick] += n;
                    fold.partition_mut(Partition::ALL[pick])
                        .insert(patient.to_string());
                }
            }
            fold
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

impl FoldPlan {
    /// Checks the plan against `m`: five folds, every patient in exactly one
    /// partition per fold, no unknown patients.
    pub fn validate(&self, m: &Manifest) -> Result<(), FoldError> {
        if self.folds.len() != NUM_FOLDS {
            return Err(FoldError::Invalid(format!(
                "expected {NUM_FOLDS} folds, found {}",
                self.folds.len()
            )));
        }
        let patients = m.patients();
        for (i, fold) in self.folds.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for p in Partition::ALL {
                for id in fold.partition(p) {
                    if !seen.insert(id) {
                        return Err(FoldError::Invalid(format!(
                            "fold {i}: patient {id} in several partitions"
                        )));
                    }
                    if !patients.contains(id) {
                        return Err(FoldError::Invalid(format!(
                            "fold {i}: unknown patient {id}"
                        )));
                    }
                }
            }
            if seen.len() != patients.len() {
                return Err(FoldError::Invalid(format!(
                    "fold {i}: covers {} of {} patients",
                    seen.len(),
                    patients.len()
                )));
            }
        }
        Ok(())
    }

    /// Image counts per (class, partition) for fold `f`.
    pub fn image_counts(&self, m: &Manifest, f: usize) -> [[usize; 3]; NUM_CLASSES] {
        let fold = &self.folds[f];
        let mut out = [[0usize; 3]; NUM_CLASSES];
        for r in &m.records {
            if let Some(p) = fold.partition_of(&r.patient_id) {
                out[r.label.index()][p as usize] += 1;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FOLDPLAN_HEADER}");
        let _ = writeln!(out, "seed\t{}", self.seed);
        for (i, fold) in self.folds.iter().enumerate() {
            for p in Partition::ALL {
                for id in fold.partition(p) {
                    let _ = writeln!(out, "{i}\t{p}\t{id}");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FoldError> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, msg: String| FoldError::Parse { line, msg };
        if lines.next().map(|(_, l)| l) != Some(FOLDPLAN_HEADER) {
            return Err(err(1, format!("expected header {FOLDPLAN_HEADER:?}")));
        }
        let seed = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("seed\t")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| err(2, format!("expected `seed<TAB><u64>`, found {l:?}")))?,
            None => return Err(err(2, "missing seed line".into())),
        };
        let mut folds = vec![Fold::default(); NUM_FOLDS];
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            let [fold, part, id] = f[..] else {
                return Err(err(
                    i + 1,
                    "expected `fold<TAB>partition<TAB>patient_id`".into(),
                ));
            };
            let fold: usize = fold
                .parse()
                .ok()
                .filter(|&k| k < NUM_FOLDS)
                .ok_or_else(|| err(i + 1, format!("bad fold index {fold:?}")))?;
            let part = Partition::ALL
                .into_iter()
                .find(|p| p.as_str() == part)
                .ok_or_else(|| err(i + 1, format!("bad partition {part:?}")))?;
            if id.is_empty() {
                return Err(err(i + 1, "empty patient id".into()));
            }
            if folds[fold].partition_of(id).is_some() {
                return Err(err(
                    i + 1,
                    format!("patient {id} assigned twice in fold {fold}"),
                ));
            }
            folds[fold].partition_mut(part).insert(id.to_string());
        }
        Ok(FoldPlan { seed, folds })
    }
}
