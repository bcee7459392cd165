use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DomainDataset, Series};

/// Multi-domain sinusoid mixture: one seasonal pattern shared by every
/// domain, plus a per-domain slope and a per-domain seasonal term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub series_per_domain: usize,
    pub length: usize,
    pub shared_period: f64,
    pub shared_amplitude: f64,
    pub slope_range: (f64, f64),
    pub period_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    /// Per-series constant offset. Zero by default.
    pub level_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 6,
            series_per_domain: 4,
            length: 200,
            shared_period: 12.0,
            shared_amplitude: 1.0,
            slope_range: (-0.01, 0.01),
            period_range: (5.0, 30.0),
            amplitude_range: (0.5, 1.5),
            phase_range: (0.0, 2.0 * PI),
            level_range: (0.0, 0.0),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Parameters drawn for one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    pub slope: f64,
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("num_domains", "must be at least 1"));
        }
        if self.series_per_domain == 0 {
            return Err(Error::config("series_per_domain", "must be at least 1"));
        }
        if self.length < 2 {
            return Err(Error::config("length", "must be at least 2"));
        }
        if !(self.shared_period.is_finite() && self.shared_period > 0.0) {
            return Err(Error::config("shared_period", "must be positive"));
        }
        if !self.shared_amplitude.is_finite() {
            return Err(Error::config("shared_amplitude", "must be finite"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be finite and nonnegative"));
        }
        for (field, (lo, hi)) in [
            ("slope_range", self.slope_range),
            ("period_range", self.period_range),
            ("amplitude_range", self.amplitude_range),
            ("phase_range", self.phase_range),
            ("level_range", self.level_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(field, format!("empty or non-finite interval [{lo}, {hi}]")));
            }
        }
        if self.period_range.0 <= 0.0 {
            return Err(Error::config("period_range", "periods must be positive"));
        }
        Ok(())
    }

    fn rng(&self, domain: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(domain as u64);
        rng
    }

    fn draw_params(&self, rng: &mut ChaCha8Rng) -> DomainParams {
        let mut u = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        DomainParams {
            slope: u(self.slope_range),
            period: u(self.period_range),
            amplitude: u(self.amplitude_range),
            phase: u(self.phase_range),
        }
    }

    /// The parameters used for domain `j`; reproducible without generating data.
    pub fn domain_params(&self, j: usize) -> DomainParams {
        self.draw_params(&mut self.rng(j))
    }

    /// Noise-free value of domain `j` at time `t`.
    pub fn clean_value(&self, p: &DomainParams, t: f64) -> f64 {
        p.slope * t
            + self.shared_amplitude * (2.0 * PI * t / self.shared_period).sin()
            + p.amplitude * (2.0 * PI * t / p.period + p.phase).sin()
    }
}

/// Each domain draws from its own random stream, so domain `j` does not
/// depend on how many other domains are generated.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let width = (spec.num_domains.max(2) - 1).to_string().len();
    let out = (0..spec.num_domains)
        .map(|j| {
            let mut rng = spec.rng(j);
            let p = spec.draw_params(&mut rng);
            let series = (0..spec.series_per_domain)
                .map(|k| {
                    let (lo, hi) = spec.level_range;
                    let level = lo + (hi - lo) * rng.random::<f64>();
                    let values = (0..spec.length)
                        .map(|t| {
                            let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            level + spec.clean_value(&p, t as f64) + e
                        })
                        .collect();
                    Series {
                        name: format!("s{k}"),
                        timestamps: (0..spec.length as i64).collect(),
                        values,
                        features: Vec::new(),
                    }
                })
                .collect();
            DomainDataset {
                domain_id: j,
                domain_name: format!("dom{j:0width$}"),
                series,
                feature_dim: 0,
            }
        })
        .collect();
    Ok(out)
}
