use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assignment of sample ids to `k` folds. Run `i` validates on fold `i` and
/// trains on the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignments: BTreeMap<String, usize>,
}

/// Seeded shuffle of `ids`, then round-robin assignment to `k` folds.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Config("number of folds must be positive".into()));
    }
    if ids.len() < k {
        return Err(Error::Contract(format!(
            "{} ids cannot fill {k} folds",
            ids.len()
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Contract("fold ids must be unique".into()));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(pos, id)| (id.clone(), pos % k))
        .collect();
    Ok(FoldSplit { k, assignments })
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in fold `fold`, sorted.
    pub fn fold(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Validation ids of run `run`.
    pub fn validation_ids(&self, run: usize) -> Vec<String> {
        self.fold(run)
    }

    /// Training ids of run `run`: everything outside fold `run`.
    pub fn training_ids(&self, run: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != run)
            .map(|(id, _)| id.clone())
            .collect()
    }
}
