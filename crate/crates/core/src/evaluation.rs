//! Forecast accuracy metrics and per-domain reports.
//!
//! Every metric takes `N x h` matrices as slices of rows. Per-domain values
//! are computed over the stacked windows of the domain; report averages give
//! each domain equal weight.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{ForecastDistribution, QUANTILES};

fn shape(y: &[Vec<f64>], yhat: &[Vec<f64>], what: &'static str) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Length {
            what,
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    for (a, b) in y.iter().zip(yhat) {
        if a.len() != b.len() {
            return Err(Error::Length {
                what,
                expected: a.len(),
                actual: b.len(),
            });
        }
    }
    Ok(())
}

fn pairs<'a>(y: &'a [Vec<f64>], yhat: &'a [Vec<f64>]) -> impl Iterator<Item = (f64, f64)> + 'a {
    y.iter()
        .zip(yhat)
        .flat_map(|(a, b)| a.iter().copied().zip(b.iter().copied()))
}

/// Root mean squared error divided by the mean absolute prediction.
pub fn nrmse(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<f64> {
    shape(y, yhat, "nrmse prediction")?;
    let (mut se, mut abs_pred, mut n) = (0.0, 0.0, 0usize);
    for (a, p) in pairs(y, yhat) {
        se += (a - p) * (a - p);
        abs_pred += p.abs();
        n += 1;
    }
    if n == 0 || abs_pred == 0.0 {
        return Err(Error::Undefined("NRMSE with all-zero predictions"));
    }
    let n = n as f64;
    Ok((se / n).sqrt() / (abs_pred / n))
}

/// Mean of `2|y − ŷ| / (|y| + |ŷ|)`; entries where both are zero count as 0.
pub fn smape(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<f64> {
    shape(y, yhat, "smape prediction")?;
    let (mut acc, mut n) = (0.0, 0usize);
    for (a, p) in pairs(y, yhat) {
        let denom = a.abs() + p.abs();
        if denom > 0.0 {
            acc += 2.0 * (a - p).abs() / denom;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined("sMAPE of an empty matrix"));
    }
    Ok(acc / n as f64)
}

/// `Σ 2|(y − ŷ_q)(1{y ≤ ŷ_q} − q)| / Σ|y|`.
pub fn quantile_loss(y: &[Vec<f64>], yhat_q: &[Vec<f64>], q: f64) -> Result<f64> {
    shape(y, yhat_q, "quantile prediction")?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config("q", format!("must lie in (0, 1), got {q}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, p) in pairs(y, yhat_q) {
        let ind = if a <= p { 1.0 } else { 0.0 };
        num += 2.0 * ((a - p) * (ind - q)).abs();
        den += a.abs();
    }
    if den == 0.0 {
        return Err(Error::Undefined("quantile loss with all-zero targets"));
    }
    Ok(num / den)
}

/// Rows of quantile level `row` from each distribution, stacked.
fn quantile_rows(dists: &[ForecastDistribution], row: usize) -> Result<Vec<Vec<f64>>> {
    dists
        .iter()
        .map(|d| {
            if d.quantiles.len() != QUANTILES.len() {
                return Err(Error::Length {
                    what: "quantile rows",
                    expected: QUANTILES.len(),
                    actual: d.quantiles.len(),
                });
            }
            Ok(d.quantiles[row].clone())
        })
        .collect()
}

/// Mean of [`quantile_loss`] over the nine levels 0.1..0.9.
pub fn q_mean(y: &[Vec<f64>], dists: &[ForecastDistribution]) -> Result<f64> {
    let mut acc = 0.0;
    for (row, &q) in QUANTILES.iter().enumerate() {
        acc += quantile_loss(y, &quantile_rows(dists, row)?, q)?;
    }
    Ok(acc / QUANTILES.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub nrmse: f64,
    pub smape: f64,
    pub q50: f64,
    pub q_mean: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 4] = ["nrmse", "smape", "q50", "q_mean"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.nrmse, self.smape, self.q50, self.q_mean]
    }

    pub fn compute(y: &[Vec<f64>], dists: &[ForecastDistribution]) -> Result<Self> {
        let point: Vec<Vec<f64>> = dists.iter().map(|d| d.point.clone()).collect();
        Ok(Self {
            nrmse: nrmse(y, &point)?,
            smape: smape(y, &point)?,
            q50: quantile_loss(y, &quantile_rows(dists, 4)?, 0.5)?,
            q_mean: q_mean(y, dists)?,
        })
    }

    fn mean(values: &[MetricValues]) -> Self {
        let n = values.len() as f64;
        let mut acc = [0.0; 4];
        for v in values {
            for (a, x) in acc.iter_mut().zip(v.as_array()) {
                *a += x;
            }
        }
        Self {
            nrmse: acc[0] / n,
            smape: acc[1] / n,
            q50: acc[2] / n,
            q_mean: acc[3] / n,
        }
    }
}

/// One evaluated window: its target in original units and the forecast.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub domain_id: usize,
    pub y: Vec<f64>,
    pub forecast: ForecastDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain_id: usize,
    pub domain: String,
    pub windows: usize,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Which domain set was evaluated, e.g. `train` or `test`.
    pub split: String,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub per_domain: Vec<DomainMetrics>,
    pub average: MetricValues,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Computes each domain's metrics over its stacked windows and averages the
/// domains with equal weight. `domains` lists the domain set as
/// `(id, name)`; listed domains without windows are skipped with a warning.
pub fn aggregate(items: &[Evaluated], domains: &[(usize, String)], split: &str) -> Result<MetricReport> {
    let mut by_domain: BTreeMap<usize, (Vec<Vec<f64>>, Vec<ForecastDistribution>)> = BTreeMap::new();
    let mut warnings = Vec::new();
    for it in items {
        if !domains.iter().any(|(id, _)| *id == it.domain_id) {
            return Err(Error::Data(format!(
                "window from domain {} is not in the `{split}` set",
                it.domain_id
            )));
        }
        let e = by_domain.entry(it.domain_id).or_default();
        e.0.push(it.y.clone());
        e.1.push(it.forecast.clone());
        if let Some(w) = &it.forecast.warning {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
    }
    let mut per_domain = Vec::new();
    for (id, name) in domains {
        match by_domain.get(id) {
            Some((y, d)) => per_domain.push(DomainMetrics {
                domain_id: *id,
                domain: name.clone(),
                windows: y.len(),
                values: MetricValues::compute(y, d)?,
            }),
            None => {
                log::warn!("domain `{name}` has no windows in the `{split}` set");
                warnings.push(format!("domain `{name}` has no windows and was excluded"));
            }
        }
    }
    if per_domain.is_empty() {
        return Err(Error::Data(format!("no windows to evaluate in the `{split}` set")));
    }
    let average = MetricValues::mean(&per_domain.iter().map(|d| d.values).collect::<Vec<_>>());
    Ok(MetricReport {
        split: split.to_string(),
        variant: None,
        seed: None,
        config_hash: None,
        per_domain,
        average,
        warnings,
    })
}

impl MetricReport {
    /// Number of table rows: one per domain plus the average.
    pub fn rows(&self) -> usize {
        self.per_domain.len() + 1
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table with one row per domain and a final average row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String, [f64; 4])> = self
            .per_domain
            .iter()
            .map(|d| (d.domain.clone(), d.windows.to_string(), d.values.as_array()))
            .collect();
        let total: usize = self.per_domain.iter().map(|d| d.windows).sum();
        rows.push(("average".into(), total.to_string(), self.average.as_array()));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("domain".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("windows".len());
        let mut out = format!("{:<w0$}  {:>w1$}", "domain", "windows");
        for name in MetricValues::NAMES {
            let _ = write!(out, "  {name:>10}");
        }
        out.push('\n');
        for (name, n, vals) in rows {
            let _ = write!(out, "{name:<w0$}  {n:>w1$}");
            for v in vals {
                let _ = write!(out, "  {v:>10.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Long-form CSV `domain,metric,value`, including the average rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,metric,value\n");
        let rows = self
            .per_domain
            .iter()
            .map(|d| (d.domain.as_str(), d.values))
            .chain(std::iter::once(("average", self.average)));
        for (name, vals) in rows {
            for (m, v) in MetricValues::NAMES.iter().zip(vals.as_array()) {
                let _ = writeln!(out, "{name},{m},{v:?}");
            }
        }
        out
    }
}
