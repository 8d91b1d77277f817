use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Case-to-fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub mapping: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.mapping.get(case_id).copied()
    }

    /// Validation cases of `fold`, sorted.
    pub fn cases_in(&self, fold: usize) -> Vec<String> {
        self.mapping
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Training cases for `fold`, i.e. every case outside it, sorted.
    pub fn cases_not_in(&self, fold: usize) -> Vec<String> {
        self.mapping
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.mapping.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let folds: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if folds.mapping.values().any(|&f| f >= folds.k) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("fold index out of range for k = {}", folds.k),
            });
        }
        Ok(folds)
    }
}

/// Seeded split of `case_ids` into `k` folds.
///
/// The ids are sorted and deduplicated, shuffled with a ChaCha8 stream seeded
/// by `seed`, then dealt round-robin, so the result does not depend on input
/// order and fold sizes differ by at most one.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::arg(format!("k must be at least 2, got {k}")));
    }
    let mut ids: Vec<&String> = case_ids.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(Error::arg("case ids must be unique"));
    }
    if k > ids.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds the number of cases ({})",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mapping = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldAssignment { k, seed, mapping })
}
