//! Datasets, windows, and the transforms applied to them before modelling.

mod csv;
mod norm;
mod split;
mod synthetic;
mod window;

use serde::{Deserialize, Serialize};

pub use self::csv::{ingest_csv, ingest_reader, write_csv, CsvSchema, FillPolicy};
pub use norm::{
    apply_scaling, invert_scaling, one_hot_domain, revin_denormalize, revin_normalize, NormStats,
    REVIN_EPS,
};
pub use split::{split_domains, DomainSplit, Region, SplitConfig, TemporalBounds};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use window::{make_windows, make_windows_where, WindowSample, WindowSet, WindowShape};

/// One univariate series with aligned integer timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    /// One feature vector per timestamp; empty when the dataset has none.
    #[serde(default)]
    pub features: Vec<Vec<f64>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub domain_name: String,
    pub series: Vec<Series>,
    /// Dimension of the external feature vectors (0 when absent).
    pub feature_dim: usize,
}

impl DomainDataset {
    /// Smallest and largest timestamp over every series.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let lo = self.series.iter().filter_map(|s| s.timestamps.first()).min()?;
        let hi = self.series.iter().filter_map(|s| s.timestamps.last()).max()?;
        Some((*lo, *hi))
    }

    /// Common timestamp step: the gcd of all consecutive differences.
    pub fn granularity(&self) -> i64 {
        let mut g = 0i64;
        for s in &self.series {
            for w in s.timestamps.windows(2) {
                g = gcd(g, w[1] - w[0]);
            }
        }
        g.max(1)
    }
}

pub(crate) fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
