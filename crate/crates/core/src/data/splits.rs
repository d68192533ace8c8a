use super::manifest::ManifestRecord;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub enum SplitPolicy {
    /// Explicit subject lists; every record's subject must land in exactly
    /// one side.
    SubjectHoldout { train_subjects: Vec<String>, test_subjects: Vec<String> },
    /// Subjects are shuffled with the given seed and dealt round-robin into
    /// `k` folds; fold `i` is the test side of assignment `i`.
    KFold { k: usize, seed: u64 },
}

/// Record indices into the originating manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitOutcome {
    Holdout(SplitAssignment),
    Folds(Vec<SplitAssignment>),
}

fn subjects_of(records: &[ManifestRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

fn assignment_from_test_subjects(records: &[ManifestRecord], test: &BTreeSet<&str>) -> SplitAssignment {
    let mut a = SplitAssignment { train: Vec::new(), test: Vec::new() };
    for (i, r) in records.iter().enumerate() {
        if test.contains(r.subject_id.as_str()) {
            a.test.push(i);
        } else {
            a.train.push(i);
        }
    }
    a
}

pub fn make_splits(records: &[ManifestRecord], policy: &SplitPolicy) -> Result<SplitOutcome> {
    if records.is_empty() {
        return Err(Error::config("cannot split an empty manifest"));
    }
    match policy {
        SplitPolicy::SubjectHoldout { train_subjects, test_subjects } => {
            let train: BTreeSet<&str> = train_subjects.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = test_subjects.iter().map(String::as_str).collect();
            if let Some(s) = train.intersection(&test).next() {
                return Err(Error::config(format!("subject {s:?} appears in both train and test lists")));
            }
            for r in records {
                let s = r.subject_id.as_str();
                if !train.contains(s) && !test.contains(s) {
                    return Err(Error::config(format!("subject {s:?} is not assigned to either side")));
                }
            }
            Ok(SplitOutcome::Holdout(assignment_from_test_subjects(records, &test)))
        }
        SplitPolicy::KFold { k, seed } => {
            let mut subjects = subjects_of(records);
            if *k < 2 {
                return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
            }
            if *k > subjects.len() {
                return Err(Error::config(format!(
                    "k-fold with k={k} but only {} distinct subjects",
                    subjects.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            subjects.shuffle(&mut rng);
            let mut fold_subjects: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); *k];
            for (i, s) in subjects.iter().enumerate() {
                fold_subjects[i % k].insert(s.as_str());
            }
            let folds = fold_subjects
                .iter()
                .map(|test| assignment_from_test_subjects(records, test))
                .collect();
            Ok(SplitOutcome::Folds(folds))
        }
    }
}
