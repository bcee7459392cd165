//! CSV ingestion: `domain,series,timestamp,value[,feat_0..feat_k]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{gcd, DomainDataset, Series};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Missing values become 0.
    #[default]
    Zero,
    /// Carry the previous observation forward (0 before the first one).
    Forward,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub fill: FillPolicy,
    /// Every value is divided by this before use.
    pub value_scale: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            fill: FillPolicy::Zero,
            value_scale: 1.0,
        }
    }
}

const REQUIRED: [&str; 4] = ["domain", "series", "timestamp", "value"];

/// Integer timestamps pass through; dates become day ordinals and
/// date-times become unix seconds.
fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(chrono::Datelike::num_days_from_ce(&d) as i64);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

type Cell = (Option<f64>, Vec<f64>);

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<DomainDataset>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<DomainDataset>> {
    if !(schema.value_scale.is_finite() && schema.value_scale != 0.0) {
        return Err(Error::config("value_scale", "must be finite and nonzero"));
    }
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 4
        || headers
            .iter()
            .zip(REQUIRED)
            .any(|(h, want)| !h.eq_ignore_ascii_case(want))
    {
        return Err(Error::Csv {
            line: 1,
            message: format!(
                "header must start with {}, got {:?}",
                REQUIRED.join(","),
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }
    let feature_dim = headers.len() - 4;

    let mut rows: BTreeMap<String, BTreeMap<String, BTreeMap<i64, Cell>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Csv { line, message };
        if rec.len() != headers.len() {
            return Err(bad(format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[2])
            .ok_or_else(|| bad(format!("unparseable timestamp `{}`", &rec[2])))?;
        let value = match rec[3].trim() {
            "" | "NA" | "NaN" | "nan" => None,
            v => Some(
                v.parse::<f64>()
                    .map_err(|_| bad(format!("unparseable value `{v}`")))?
                    / schema.value_scale,
            ),
        };
        let mut feats = Vec::with_capacity(feature_dim);
        for f in rec.iter().skip(4) {
            feats.push(if f.is_empty() {
                0.0
            } else {
                f.parse::<f64>()
                    .map_err(|_| bad(format!("unparseable feature `{f}`")))?
            });
        }
        let series = rows
            .entry(rec[0].to_string())
            .or_default()
            .entry(rec[1].to_string())
            .or_default();
        if series.insert(ts, (value, feats)).is_some() {
            return Err(Error::DuplicateRow {
                domain: rec[0].to_string(),
                series: rec[1].to_string(),
                timestamp: ts,
                line,
            });
        }
    }

    let mut out = Vec::with_capacity(rows.len());
    for (domain_id, (domain_name, by_series)) in rows.into_iter().enumerate() {
        let mut step = 0;
        for cells in by_series.values() {
            let ts: Vec<i64> = cells.keys().copied().collect();
            for w in ts.windows(2) {
                step = gcd(step, w[1] - w[0]);
            }
        }
        let step = step.max(1);
        let series = by_series
            .into_iter()
            .map(|(name, cells)| fill_series(name, cells, step, feature_dim, schema.fill))
            .collect();
        out.push(DomainDataset {
            domain_id,
            domain_name,
            series,
            feature_dim,
        });
    }
    Ok(out)
}

fn fill_series(
    name: String,
    cells: BTreeMap<i64, Cell>,
    step: i64,
    feature_dim: usize,
    fill: FillPolicy,
) -> Series {
    let (first, last) = match (cells.keys().next(), cells.keys().next_back()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => {
            return Series {
                name,
                timestamps: vec![],
                values: vec![],
                features: vec![],
            }
        }
    };
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut features = Vec::new();
    let mut prev = 0.0;
    let mut t = first;
    while t <= last {
        let (v, f) = match cells.get(&t) {
            Some((v, f)) => (*v, f.clone()),
            None => (None, vec![0.0; feature_dim]),
        };
        let v = v.unwrap_or(match fill {
            FillPolicy::Zero => 0.0,
            FillPolicy::Forward => prev,
            FillPolicy::Constant(c) => c,
        });
        prev = v;
        timestamps.push(t);
        values.push(v);
        if feature_dim > 0 {
            features.push(f);
        }
        t += step;
    }
    Series {
        name,
        timestamps,
        values,
        features,
    }
}

/// Writes datasets in the ingest schema. Feature columns are `feat_<k>`.
pub fn write_csv<W: Write>(writer: W, datasets: &[DomainDataset]) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(writer);
    let dim = datasets.iter().map(|d| d.feature_dim).max().unwrap_or(0);
    let mut header: Vec<String> = REQUIRED.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|k| format!("feat_{k}")));
    let io = |e: ::csv::Error| Error::Data(e.to_string());
    w.write_record(&header).map_err(io)?;
    for d in datasets {
        for s in &d.series {
            for (i, (t, v)) in s.timestamps.iter().zip(&s.values).enumerate() {
                let mut rec = vec![
                    d.domain_name.clone(),
                    s.name.clone(),
                    t.to_string(),
                    v.to_string(),
                ];
                for k in 0..dim {
                    rec.push(s.features.get(i).and_then(|f| f.get(k)).copied().unwrap_or(0.0).to_string());
                }
                w.write_record(&rec).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
