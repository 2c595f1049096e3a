//! Seeded, stratified fold assignment.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HazardError, Result};

/// Assigns each item to one of `k` folds so that both strata are spread
/// evenly. Items of each stratum are shuffled with `seed` and dealt
/// round-robin, the positive stratum first.
pub fn stratified_folds(strata: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(HazardError::Folds(format!("need at least 2 folds, got {k}")));
    }
    if strata.len() < k {
        return Err(HazardError::Folds(format!(
            "{} items cannot fill {k} folds",
            strata.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..strata.len()).filter(|&i| strata[i]).collect();
    let mut neg: Vec<usize> = (0..strata.len()).filter(|&i| !strata[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; strata.len()];
    for (slot, &i) in pos.iter().chain(neg.iter()).enumerate() {
        fold[i] = slot % k;
    }
    Ok(fold)
}

/// Folds over groups: every item of one group lands in the same fold. A
/// group's stratum is positive if any of its items is.
pub fn grouped_stratified_folds<S: AsRef<str>>(
    groups: &[S],
    strata: &[bool],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut ids: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut group_of = Vec::with_capacity(groups.len());
    for g in groups {
        let g = g.as_ref();
        let next = ids.len();
        let gi = *index.entry(g).or_insert_with(|| {
            ids.push(g);
            next
        });
        group_of.push(gi);
    }
    if ids.len() < k {
        return Err(HazardError::Folds(format!(
            "{} patients cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut group_stratum = vec![false; ids.len()];
    for (gi, &s) in group_of.iter().zip(strata) {
        group_stratum[*gi] |= s;
    }
    let group_fold = stratified_folds(&group_stratum, k, seed)?;
    Ok(group_of.iter().map(|&gi| group_fold[gi]).collect())
}

/// `(train, test)` row indices for fold `f`.
pub fn split(assignment: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != f)
}
