use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::rng::SeedSource;

pub const TEST_FRACTION: f64 = 0.3;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Split assignment per loan id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitPlan {
    /// Positions in `ids` assigned to `which`, in input order.
    pub fn indices(&self, ids: &[String], which: Split) -> Vec<usize> {
        ids.iter().enumerate().filter(|(_, id)| self.assignments.get(*id) == Some(&which)).map(|(i, _)| i).collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.assignments.values().filter(|s| **s == which).count()
    }

    /// SHA-256 over the sorted `id,split` lines.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (id, s) in &self.assignments {
            h.update(format!("{id},{s:?}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Stratified 70/30 train-pool/test split with 20% of the pool held out for
/// validation. Counts are rounded per class; rounding slack goes to TRAIN.
pub fn make_split(ids: &[String], labels: &[u8], seed: u64) -> Result<SplitPlan, TrainError> {
    if ids.len() != labels.len() {
        return Err(TrainError::InvalidConfig("ids and labels differ in length".into()));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(TrainError::SingleClass);
    }
    let mut rng = SeedSource::new(seed).stream("split");
    let mut assignments = BTreeMap::new();
    for class in [0u8, 1] {
        let mut members: Vec<&String> = ids.iter().zip(labels).filter(|(_, &y)| y == class).map(|(id, _)| id).collect();
        members.sort();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = (n as f64 * TEST_FRACTION).round() as usize;
        let n_val = ((n - n_test) as f64 * VAL_FRACTION).round() as usize;
        for (k, id) in members.into_iter().enumerate() {
            let s = if k < n_test {
                Split::Test
            } else if k < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            assignments.insert(id.clone(), s);
        }
    }
    Ok(SplitPlan { seed, assignments })
}
