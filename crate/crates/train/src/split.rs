use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Result, TrainError};

/// Disjoint study-level partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitPlan {
    /// Ids allowed during training and validation.
    pub fn fitting_ids(&self) -> BTreeSet<String> {
        self.train_ids.iter().chain(&self.val_ids).cloned().collect()
    }
}

/// Shuffle studies with `seed`, hold out the test share, then carve the
/// validation share from what remains.
pub fn make_split(studies: &[String], cfg: &TrainConfig, seed: u64) -> Result<SplitPlan> {
    cfg.validate()?;
    let mut ids: Vec<String> = studies.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if n < 4 {
        return Err(TrainError::TooFewStudies(n));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * (1.0 - cfg.train_fraction)).round() as usize).clamp(1, n - 2);
    let n_fit = n - n_test;
    let n_val = ((n_fit as f64 * cfg.val_fraction).round() as usize).clamp(1, n_fit - 1);
    let test_ids = ids.split_off(n_fit);
    let val_ids = ids.split_off(n_fit - n_val);
    let mut plan = SplitPlan {
        train_ids: ids,
        val_ids,
        test_ids,
    };
    plan.train_ids.sort();
    plan.val_ids.sort();
    plan.test_ids.sort();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn minimum_size() {
        let cfg = TrainConfig::default();
        assert!(matches!(make_split(&ids(3), &cfg, 0), Err(TrainError::TooFewStudies(3))));
        let p = make_split(&ids(4), &cfg, 0).unwrap();
        assert_eq!((p.train_ids.len(), p.val_ids.len(), p.test_ids.len()), (2, 1, 1));
    }

    #[test]
    fn duplicates_count_once() {
        let mut v = ids(10);
        v.extend(ids(10));
        let p = make_split(&v, &TrainConfig::default(), 1).unwrap();
        assert_eq!(p.train_ids.len() + p.val_ids.len() + p.test_ids.len(), 10);
    }
}
