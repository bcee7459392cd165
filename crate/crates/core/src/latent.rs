//! Export of posterior-mean latents and a distance-ratio summary of how
//! well each latent part separates domains.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cvae::split_index;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub domain_id: usize,
    pub series: usize,
    pub origin: i64,
    pub z_shared: Vec<f64>,
    pub z_specific: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDump {
    pub d_z: usize,
    pub alpha: f64,
    pub rows: Vec<LatentRow>,
}

impl LatentDump {
    pub fn shared_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z_shared.len())
    }

    pub fn specific_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z_specific.len())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["domain_id".to_string(), "series_id".into(), "origin".into()];
        h.extend((0..self.shared_dim()).map(|i| format!("shared_{i}")));
        h.extend((0..self.specific_dim()).map(|i| format!("specific_{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let map = |e: csv::Error| Error::Data(format!("writing latent dump: {e}"));
        w.write_record(self.header()).map_err(map)?;
        for r in &self.rows {
            let mut rec = vec![r.domain_id.to_string(), r.series.to_string(), r.origin.to_string()];
            rec.extend(r.z_shared.iter().chain(&r.z_specific).map(|v| format!("{v:?}")));
            w.write_record(rec).map_err(map)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Encodes every window with `z = μ` and splits the latents. When
/// `expected` is given as `(d_z, α)` it must agree with the model.
pub fn dump_latents(model: &Model, windows: &[&WindowSample], expected: Option<(usize, f64)>) -> Result<LatentDump> {
    let (d_z, alpha) = (model.config.d_z, model.config.alpha);
    if let Some((d, a)) = expected {
        if d != d_z {
            return Err(Error::config("d_z", format!("requested {d}, checkpoint has {d_z}")));
        }
        if split_index(a, d)? != split_index(alpha, d_z)? {
            return Err(Error::config("alpha", format!("requested {a}, checkpoint has {alpha}")));
        }
    }
    let index = split_index(alpha, d_z)?;
    let means = model.encode_means(windows)?;
    let rows = windows
        .iter()
        .zip(means)
        .map(|(w, (t, s))| {
            let (z_shared, z_specific) = match s {
                Some(s) => ([&t[..index], &s[..index]].concat(), [&t[index..], &s[index..]].concat()),
                None => (t[..index].to_vec(), t[index..].to_vec()),
            };
            LatentRow {
                domain_id: w.domain_id,
                series: w.series,
                origin: w.origin,
                z_shared,
                z_specific,
            }
        })
        .collect();
    Ok(LatentDump { d_z, alpha, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub shared_ratio: f64,
    pub specific_ratio: f64,
    /// Set when a ratio was 0/0 and reported as 1.
    pub shared_degenerate: bool,
    pub specific_degenerate: bool,
    pub warnings: Vec<String>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean inter-domain over mean intra-domain pairwise distance.
fn ratio(vectors: &[&[f64]], domains: &[usize]) -> (f64, bool) {
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = dist(vectors[i], vectors[j]);
            if domains[i] == domains[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let inter = inter / n_inter as f64;
    let intra = intra / n_intra as f64;
    if inter == 0.0 && intra == 0.0 {
        (1.0, true)
    } else {
        (inter / intra, false)
    }
}

pub fn separation_score(dump: &LatentDump) -> Result<SeparationScore> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &dump.rows {
        *counts.entry(r.domain_id).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Data(format!(
            "separation needs at least 2 domains, the dump has {}",
            counts.len()
        )));
    }
    let mut warnings = Vec::new();
    for (d, n) in &counts {
        if *n == 1 {
            log::warn!("domain {d} has a single latent row; it adds no intra-domain pairs");
            warnings.push(format!("domain {d} has a single row and is excluded from intra-domain means"));
        }
    }
    if counts.values().all(|&n| n < 2) {
        return Err(Error::Undefined("separation score without intra-domain pairs"));
    }
    let domains: Vec<usize> = dump.rows.iter().map(|r| r.domain_id).collect();
    let shared: Vec<&[f64]> = dump.rows.iter().map(|r| r.z_shared.as_slice()).collect();
    let specific: Vec<&[f64]> = dump.rows.iter().map(|r| r.z_specific.as_slice()).collect();
    let (shared_ratio, shared_degenerate) = ratio(&shared, &domains);
    let (specific_ratio, specific_degenerate) = ratio(&specific, &domains);
    Ok(SeparationScore {
        shared_ratio,
        specific_ratio,
        shared_degenerate,
        specific_degenerate,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn row(domain_id: usize, shared: Vec<f64>, specific: Vec<f64>) -> LatentRow {
        LatentRow {
            domain_id,
            series: 0,
            origin: 0,
            z_shared: shared,
            z_specific: specific,
        }
    }

    fn dump(rows: Vec<LatentRow>) -> LatentDump {
        LatentDump { d_z: 2, alpha: 0.5, rows }
    }

    #[test]
    fn identical_vectors_are_flagged() {
        let d = dump((0..6).map(|i| row(i % 2, vec![1.0], vec![2.0])).collect());
        let s = separation_score(&d).unwrap();
        assert_eq!((s.shared_ratio, s.specific_ratio), (1.0, 1.0));
        assert!(s.shared_degenerate && s.specific_degenerate);
    }

    #[test]
    fn clustered_specific_parts_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let rows = (0..40)
            .map(|i| {
                let dom = i % 2;
                row(dom, vec![n()], vec![10.0 * dom as f64 + 0.1 * n()])
            })
            .collect();
        let s = separation_score(&dump(rows)).unwrap();
        assert!(s.specific_ratio > 10.0 * s.shared_ratio, "{s:?}");
        assert!((s.shared_ratio - 1.0).abs() < 0.3);
    }

    #[test]
    fn single_domain_and_singletons() {
        let d = dump(vec![row(0, vec![0.0], vec![0.0]), row(0, vec![1.0], vec![1.0])]);
        assert!(separation_score(&d).is_err());
        let d = dump(vec![
            row(0, vec![0.0], vec![0.0]),
            row(0, vec![1.0], vec![1.0]),
            row(1, vec![3.0], vec![3.0]),
        ]);
        let s = separation_score(&d).unwrap();
        assert_eq!(s.warnings.len(), 1);
        // inter = (3 + 2) / 2, intra = 1.
        assert!((s.shared_ratio - 2.5).abs() < 1e-12);
    }

    #[test]
    fn header_tracks_dimensions() {
        let d = LatentDump {
            d_z: 4,
            alpha: 0.5,
            rows: vec![row(0, vec![0.0; 4], vec![0.0; 4])],
        };
        let h = d.header();
        assert_eq!(h.len(), 3 + 8);
        assert_eq!(h[3], "shared_0");
        assert_eq!(h[10], "specific_3");
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
