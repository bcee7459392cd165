use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::DomainDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of domains held out entirely for testing.
    pub test_fraction: f64,
    /// Tail of the in-domain training period used for validation.
    pub val_fraction: f64,
    /// Tail of each training domain kept out of training and validation.
    pub holdout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.2,
            holdout_fraction: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(
                "holdout_fraction",
                format!("must lie in [0, 1), got {}", self.holdout_fraction),
            ));
        }
        Ok(())
    }
}

/// Per-domain timestamps separating training, validation and holdout targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalBounds {
    pub train_end: i64,
    pub val_end: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Every target strictly before `train_end`.
    Train,
    /// Targets within `[train_end, val_end)`.
    Val,
    /// Targets at or after `val_end`.
    Holdout,
    /// No temporal restriction.
    All,
}

impl Region {
    pub fn contains(self, bounds: Option<&TemporalBounds>, first: i64, last: i64) -> bool {
        let Some(b) = bounds else {
            return self == Region::All;
        };
        match self {
            Region::Train => last < b.train_end,
            Region::Val => first >= b.train_end && last < b.val_end,
            Region::Holdout => first >= b.val_end,
            Region::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    /// Sorted ascending.
    pub train_domains: Vec<usize>,
    /// Sorted ascending.
    pub test_domains: Vec<usize>,
    pub boundaries: BTreeMap<usize, TemporalBounds>,
}

impl DomainSplit {
    pub fn is_train(&self, domain_id: usize) -> bool {
        self.train_domains.binary_search(&domain_id).is_ok()
    }

    /// Position of a training domain in the one-hot encoding.
    pub fn train_index(&self, domain_id: usize) -> Option<usize> {
        self.train_domains.binary_search(&domain_id).ok()
    }
}

/// Randomly partitions domains and fixes temporal boundaries inside each
/// training domain. The same seed always yields the same split.
pub fn split_domains(datasets: &[DomainDataset], cfg: &SplitConfig, seed: u64) -> Result<DomainSplit> {
    cfg.validate()?;
    let n = datasets.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 domains to split, got {n}")));
    }
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::config(
            "test_fraction",
            format!("{} of {n} domains gives {n_test} test domains", cfg.test_fraction),
        ));
    }
    let mut ids: Vec<usize> = datasets.iter().map(|d| d.domain_id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_domains = ids[..n_test].to_vec();
    let mut train_domains = ids[n_test..].to_vec();
    test_domains.sort_unstable();
    train_domains.sort_unstable();

    let mut boundaries = BTreeMap::new();
    for d in datasets.iter().filter(|d| train_domains.contains(&d.domain_id)) {
        let (lo, hi) = d
            .time_range()
            .ok_or_else(|| Error::Data(format!("training domain `{}` is empty", d.domain_name)))?;
        let span = (hi - lo + d.granularity()) as f64;
        let val_end = lo + (span * (1.0 - cfg.holdout_fraction)).floor() as i64;
        let train_end = lo + ((val_end - lo) as f64 * (1.0 - cfg.val_fraction)).floor() as i64;
        if !(lo < train_end && train_end < val_end) {
            return Err(Error::Data(format!(
                "domain `{}` is too short for a train/validation split",
                d.domain_name
            )));
        }
        boundaries.insert(d.domain_id, TemporalBounds { train_end, val_end });
    }
    Ok(DomainSplit {
        train_domains,
        test_domains,
        boundaries,
    })
}
