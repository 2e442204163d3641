use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SampleId, Split};
use crate::error::{Error, Result};

/// Labeled set, unlabeled pool and test set of one active-learning run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolState {
    pub labeled: BTreeSet<SampleId>,
    pub pool: BTreeSet<SampleId>,
    pub test: BTreeSet<SampleId>,
    pub round: usize,
    initial_labeled: usize,
    total: usize,
}

impl PoolState {
    pub fn new(labeled: BTreeSet<SampleId>, pool: BTreeSet<SampleId>, test: BTreeSet<SampleId>) -> Result<Self> {
        let s = Self {
            initial_labeled: labeled.len(),
            total: labeled.len() + pool.len(),
            labeled,
            pool,
            test,
            round: 0,
        };
        s.check_disjoint()?;
        Ok(s)
    }

    pub fn initial_labeled(&self) -> usize {
        self.initial_labeled
    }

    /// Move a queried batch from the pool into the labeled set and advance the round.
    pub fn apply_batch(&mut self, batch: &[SampleId]) -> Result<()> {
        let unique: BTreeSet<_> = batch.iter().copied().collect();
        if unique.len() != batch.len() {
            return Err(Error::contract("query batch contains duplicate ids"));
        }
        if let Some(id) = batch.iter().find(|id| !self.pool.contains(id)) {
            return Err(Error::contract(format!("queried id {id} is not in the pool")));
        }
        for id in batch {
            self.pool.remove(id);
            self.labeled.insert(*id);
        }
        self.round += 1;
        Ok(())
    }

    fn check_disjoint(&self) -> Result<()> {
        let overlap = |a: &BTreeSet<SampleId>, b: &BTreeSet<SampleId>, what: &str| match a.intersection(b).next() {
            Some(id) => Err(Error::contract(format!("id {id} is in both {what}"))),
            None => Ok(()),
        };
        overlap(&self.labeled, &self.pool, "labeled set and pool")?;
        overlap(&self.labeled, &self.test, "labeled set and test set")?;
        overlap(&self.pool, &self.test, "pool and test set")
    }

    /// Disjointness, constant labeled+pool total and `|S_t| = |S_0| + t·K`
    /// (when every round queried a full batch of `k`).
    pub fn check_invariants(&self, k: Option<usize>) -> Result<()> {
        self.check_disjoint()?;
        if self.labeled.len() + self.pool.len() != self.total {
            return Err(Error::contract(format!(
                "labeled ({}) + pool ({}) != initial total {}",
                self.labeled.len(),
                self.pool.len(),
                self.total
            )));
        }
        if let Some(k) = k {
            let expected = self.initial_labeled + self.round * k;
            if self.labeled.len() != expected {
                return Err(Error::contract(format!(
                    "after round {} the labeled set has {} ids, expected {expected}",
                    self.round,
                    self.labeled.len()
                )));
            }
        }
        Ok(())
    }
}

/// Draw a class-balanced seed set from the pool portion.
///
/// Each class contributes `seed_set / N` ids (the remainder is not drawn and
/// stays in the pool). The draw is seeded from the dataset spec.
pub fn split(dataset: &Dataset) -> Result<PoolState> {
    split_with_seed(dataset, dataset.spec.seed)
}

/// [`split`] with an explicit seed for the seed-set draw.
pub fn split_with_seed(dataset: &Dataset, seed: u64) -> Result<PoolState> {
    let spec = &dataset.spec;
    let n = spec.num_classes;
    let per_class = spec.seed_set / n;
    if per_class == 0 {
        return Err(Error::contract(format!(
            "seed set of {} cannot hold one sample of each of {n} classes",
            spec.seed_set
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d5e7);
    let mut by_class: Vec<Vec<SampleId>> = vec![Vec::new(); n];
    for id in dataset.ids_in(Split::Pool) {
        let label = dataset.get(id)?.require_label()?;
        by_class[label].push(id);
    }
    let mut labeled = BTreeSet::new();
    for (class, ids) in by_class.iter_mut().enumerate() {
        if ids.len() < per_class + 1 {
            return Err(Error::contract(format!(
                "class {class} has {} pool samples, need more than {per_class}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        labeled.extend(ids[..per_class].iter().copied());
    }
    let pool = dataset
        .ids_in(Split::Pool)
        .into_iter()
        .filter(|id| !labeled.contains(id))
        .collect();
    let test = dataset.ids_in(Split::Test).into_iter().collect();
    PoolState::new(labeled, pool, test)
}
