use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::norm::{apply_scaling, revin_normalize, NormStats};
use super::DomainDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowShape {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            stride: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::config("lookback", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        Ok(())
    }
}

/// One training or evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Lookback values.
    pub x: Vec<f64>,
    /// External features, `lookback x feature_dim` row-major.
    pub a: Vec<f64>,
    pub feature_dim: usize,
    /// Target values in the same space as `x`.
    pub y: Vec<f64>,
    /// Target in original units, untouched by scaling or normalization.
    pub y_raw: Vec<f64>,
    pub domain_id: usize,
    pub series: usize,
    /// Timestamp of the last lookback step.
    pub origin: i64,
    pub scale: f64,
    pub norm_stats: NormStats,
}

impl WindowSample {
    pub fn raw(
        x: Vec<f64>,
        y: Vec<f64>,
        a: Vec<f64>,
        feature_dim: usize,
        domain_id: usize,
        series: usize,
        origin: i64,
    ) -> Self {
        Self {
            x,
            a,
            feature_dim,
            y_raw: y.clone(),
            y,
            domain_id,
            series,
            origin,
            scale: 1.0,
            norm_stats: NormStats::IDENTITY,
        }
    }

    pub fn lookback(&self) -> usize {
        self.x.len()
    }

    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    /// Scales, then instance-normalizes with statistics of the lookback.
    pub fn prepare(self) -> Self {
        let mut s = apply_scaling(self);
        let (x, stats) = revin_normalize(&s.x);
        s.y = s.y.iter().map(|&v| stats.normalize(v)).collect();
        s.x = x;
        s.norm_stats = stats;
        s
    }

    /// Maps values from model space back to original units.
    pub fn restore(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| self.norm_stats.denormalize(v) * self.scale)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<WindowSample>,
    /// Series too short for a single window.
    pub skipped_series: usize,
}

pub fn make_windows(datasets: &[DomainDataset], shape: WindowShape) -> Result<WindowSet> {
    make_windows_where(datasets, shape, |_, _, _| true)
}

/// Like [`make_windows`], keeping only windows for which
/// `keep(domain, first_target_ts, last_target_ts)` holds.
pub fn make_windows_where<F>(
    datasets: &[DomainDataset],
    shape: WindowShape,
    keep: F,
) -> Result<WindowSet>
where
    F: Fn(&DomainDataset, i64, i64) -> bool,
{
    shape.validate()?;
    let WindowShape {
        lookback: t,
        horizon: h,
        stride,
    } = shape;
    let mut out = WindowSet::default();
    for ds in datasets {
        for (si, s) in ds.series.iter().enumerate() {
            if s.len() < t + h {
                out.skipped_series += 1;
                continue;
            }
            for start in (0..=s.len() - t - h).step_by(stride) {
                let first = s.timestamps[start + t];
                let last = s.timestamps[start + t + h - 1];
                if !keep(ds, first, last) {
                    continue;
                }
                let a = if ds.feature_dim > 0 {
                    s.features[start..start + t].concat()
                } else {
                    Vec::new()
                };
                out.windows.push(WindowSample::raw(
                    s.values[start..start + t].to_vec(),
                    s.values[start + t..start + t + h].to_vec(),
                    a,
                    ds.feature_dim,
                    ds.domain_id,
                    si,
                    s.timestamps[start + t - 1],
                ));
            }
        }
    }
    if out.skipped_series > 0 {
        log::warn!(
            "{} series shorter than lookback + horizon = {} were skipped",
            out.skipped_series,
            t + h
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Series;

    fn dataset(domain_id: usize, values: Vec<Vec<f64>>) -> DomainDataset {
        DomainDataset {
            domain_id,
            domain_name: format!("d{domain_id}"),
            series: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| Series {
                    name: format!("s{i}"),
                    timestamps: (0..v.len() as i64).collect(),
                    values: v,
                    features: Vec::new(),
                })
                .collect(),
            feature_dim: 0,
        }
    }

    #[test]
    fn table_one_web_traffic_shape_gives_one_window() {
        let ds = dataset(0, vec![(0..120).map(f64::from).collect()]);
        let set = make_windows(&[ds], WindowShape::new(90, 30)).unwrap();
        assert_eq!(set.windows.len(), 1);
    }

    #[test]
    fn short_series_enumeration() {
        let ds = dataset(3, vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let set = make_windows(&[ds], WindowShape::new(3, 1)).unwrap();
        assert_eq!(set.windows.len(), 2);
        assert_eq!(set.windows[0].x, vec![1.0, 2.0, 3.0]);
        assert_eq!(set.windows[0].y, vec![4.0]);
        assert_eq!(set.windows[1].x, vec![2.0, 3.0, 4.0]);
        assert_eq!(set.windows[1].y, vec![5.0]);
        assert!(set.windows.iter().all(|w| w.domain_id == 3));
        assert_eq!(set.windows[1].origin, 3);
    }

    #[test]
    fn stride_of_series_length() {
        let ds = dataset(0, vec![(0..10).map(f64::from).collect()]);
        let shape = WindowShape {
            lookback: 3,
            horizon: 2,
            stride: 10,
        };
        assert!(make_windows(&[ds], shape).unwrap().windows.len() <= 1);
    }

    #[test]
    fn short_series_are_counted_not_fatal() {
        let ds = dataset(0, vec![vec![1.0; 3], vec![1.0; 8]]);
        let set = make_windows(&[ds], WindowShape::new(4, 2)).unwrap();
        assert_eq!(set.skipped_series, 1);
        assert_eq!(set.windows.len(), 3);
    }

    #[test]
    fn windows_never_mix_series_or_domains() {
        // Every value encodes (domain, series) so any leak is visible.
        let sentinel = |d: usize, s: usize| (d * 100 + s) as f64;
        let datasets: Vec<_> = (0..3)
            .map(|d| dataset(d, (0..4).map(|s| vec![sentinel(d, s); 12]).collect()))
            .collect();
        let set = make_windows(&datasets, WindowShape::new(5, 3)).unwrap();
        assert_eq!(set.windows.len(), 3 * 4 * 5);
        for w in &set.windows {
            let v = sentinel(w.domain_id, w.series);
            assert!(w.x.iter().chain(&w.y).all(|&x| x == v));
        }
    }

    #[test]
    fn prepare_then_restore_recovers_target() {
        let w = WindowSample::raw(vec![2.0, 5.0, -1.0, 3.0], vec![7.0, 8.0], vec![], 0, 0, 0, 0);
        let p = w.clone().prepare();
        assert!(p.scale > 1.0);
        for (a, b) in p.restore(&p.y).iter().zip(&w.y) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(p.y_raw, w.y);
    }
}
