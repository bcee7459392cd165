use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::WindowSample;

/// Added to the instance standard deviation before dividing.
pub const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0 - REVIN_EPS,
    };

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / (self.std + REVIN_EPS)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * (self.std + REVIN_EPS) + self.mean
    }
}

/// Standardizes `x` with its own mean and (population) standard deviation.
pub fn revin_normalize(x: &[f64]) -> (Vec<f64>, NormStats) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let stats = NormStats {
        mean,
        std: var.sqrt(),
    };
    (x.iter().map(|&v| stats.normalize(v)).collect(), stats)
}

pub fn revin_denormalize(output: &[f64], stats: &NormStats) -> Vec<f64> {
    output.iter().map(|&v| stats.denormalize(v)).collect()
}

/// Divides lookback and target by `1 + mean(|x|)` and records the factor.
pub fn apply_scaling(mut sample: WindowSample) -> WindowSample {
    let n = sample.x.len().max(1) as f64;
    let scale = 1.0 + sample.x.iter().map(|v| v.abs()).sum::<f64>() / n;
    sample.x.iter_mut().for_each(|v| *v /= scale);
    sample.y.iter_mut().for_each(|v| *v /= scale);
    sample.scale *= scale;
    sample
}

pub fn invert_scaling(mut sample: WindowSample) -> WindowSample {
    let s = sample.scale;
    sample.x.iter_mut().for_each(|v| *v *= s);
    sample.y.iter_mut().for_each(|v| *v *= s);
    sample.scale = 1.0;
    sample
}

/// Binary indicator of a training domain. Only training domains have an
/// index; anything else is a contract violation.
pub fn one_hot_domain(domain_id: usize, num_train_domains: usize) -> Result<Vec<f64>> {
    if domain_id >= num_train_domains {
        return Err(Error::UnknownDomain {
            domain_id,
            num_domains: num_train_domains,
        });
    }
    let mut v = vec![0.0; num_train_domains];
    v[domain_id] = 1.0;
    Ok(v)
}
