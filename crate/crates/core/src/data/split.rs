use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

/// Sample indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patient-level k-fold split, stratified by grade.
///
/// Patients are grouped by grade (a patient's most common grade), shuffled
/// within each group, then dealt round-robin to folds in grade order, so
/// fold sizes differ by at most one patient.
pub fn kfold_split(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        patients.entry(&s.patient_id).or_default().push(i);
    }
    if k < 2 || k > patients.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} patients",
            patients.len()
        )));
    }
    let mut by_grade: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (pid, idx) in &patients {
        let mut counts = BTreeMap::new();
        for &i in idx {
            *counts.entry(samples[i].grade).or_insert(0usize) += 1;
        }
        let grade = counts.iter().max_by_key(|&(g, n)| (*n, std::cmp::Reverse(*g))).map(|(g, _)| *g).unwrap_or(0);
        by_grade.entry(grade).or_default().push(pid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0;
    for group in by_grade.values_mut() {
        group.shuffle(&mut rng);
        for pid in group.iter() {
            fold_of.insert(pid, next % k);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..samples.len()).partition(|&i| fold_of[samples[i].patient_id.as_str()] == f);
            Fold { train, test }
        })
        .collect())
}
