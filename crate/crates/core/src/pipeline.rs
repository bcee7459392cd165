//! Experiment configuration and the end-to-end run: data, domain split,
//! windows, training, and per-domain-set evaluation.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, ingest_csv, make_windows_where, split_domains, CsvSchema, DomainDataset, DomainSplit,
    Region, SplitConfig, SyntheticSpec, WindowSample, WindowShape,
};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, Evaluated, MetricReport, MetricValues};
use crate::model::{Model, ModelConfig, Variant};
use crate::training::{train_model, RunRecord, TrainConfig};

/// Where the series come from. Without `path` the synthetic generator is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub csv: CsvSchema,
    pub synthetic: SyntheticSpec,
    /// Step between consecutive window origins.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            csv: CsvSchema::default(),
            synthetic: SyntheticSpec::default(),
            stride: 1,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<DomainDataset>> {
        match &self.path {
            Some(p) => ingest_csv(p, &self.csv),
            None => generate_synthetic(&self.synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Temporal region of the training domains that the train report uses.
    pub train_region: Region,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_region: Region::Holdout,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Copy with every implicit choice written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.encoder = Some(c.model.encoder_kind());
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.stride == 0 {
            return Err(Error::config("data.stride", "must be at least 1"));
        }
        if self.eval.train_region == Region::All {
            return Err(Error::config("eval.train_region", "must be train, val or holdout"));
        }
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.variant)
    }

    /// Stable within one build; identifies the resolved configuration.
    pub fn hash(&self) -> String {
        let text = self.resolved().to_toml().unwrap_or_default();
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn shape(&self) -> WindowShape {
        WindowShape {
            lookback: self.model.lookback,
            horizon: self.model.horizon,
            stride: self.data.stride,
        }
    }
}

/// RNG stream ids derived from one run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Predict = 3,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Prepared windows of one split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DomainSplit,
    pub names: Vec<(usize, String)>,
    pub feature_dim: usize,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    /// Last stretch of the training domains.
    pub holdout: Vec<WindowSample>,
    /// Every window of the test domains.
    pub test: Vec<WindowSample>,
}

impl PreparedData {
    pub fn domains(&self, ids: &[usize]) -> Vec<(usize, String)> {
        self.names.iter().filter(|(id, _)| ids.contains(id)).cloned().collect()
    }

    pub fn train_domains(&self) -> Vec<(usize, String)> {
        self.domains(&self.split.train_domains)
    }

    pub fn test_domains(&self) -> Vec<(usize, String)> {
        self.domains(&self.split.test_domains)
    }

    /// Windows of the training domains inside `region`.
    pub fn train_region(&self, region: Region) -> &[WindowSample] {
        match region {
            Region::Train => &self.train,
            Region::Val => &self.val,
            Region::Holdout | Region::All => &self.holdout,
        }
    }
}

pub fn prepare_data(datasets: &[DomainDataset], cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let split = split_domains(datasets, &cfg.split, seed)?;
    let shape = cfg.shape();
    let feature_dim = datasets.first().map_or(0, |d| d.feature_dim);
    if feature_dim != cfg.model.feature_dim {
        return Err(Error::config(
            "model.feature_dim",
            format!("data has {feature_dim} features, config says {}", cfg.model.feature_dim),
        ));
    }
    let region = |r: Region| -> Result<Vec<WindowSample>> {
        let set = make_windows_where(datasets, shape, |ds, first, last| {
            split.is_train(ds.domain_id) && r.contains(split.boundaries.get(&ds.domain_id), first, last)
        })?;
        Ok(set.windows.into_iter().map(WindowSample::prepare).collect())
    };
    let train = region(Region::Train)?;
    let val = region(Region::Val)?;
    let holdout = region(Region::Holdout)?;
    let test = make_windows_where(datasets, shape, |ds, _, _| !split.is_train(ds.domain_id))?
        .windows
        .into_iter()
        .map(WindowSample::prepare)
        .collect::<Vec<_>>();
    for (what, set) in [("training", &train), ("validation", &val), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::Data(format!(
                "no {what} windows; series are too short for lookback {} + horizon {}",
                shape.lookback, shape.horizon
            )));
        }
    }
    Ok(PreparedData {
        names: datasets.iter().map(|d| (d.domain_id, d.domain_name.clone())).collect(),
        split,
        feature_dim,
        train,
        val,
        holdout,
        test,
    })
}

pub fn refs(windows: &[WindowSample]) -> Vec<&WindowSample> {
    windows.iter().collect()
}

/// Forecasts every window and reports metrics in original units.
pub fn evaluate_windows(
    model: &Model,
    windows: &[WindowSample],
    domains: &[(usize, String)],
    split: &str,
    seed: u64,
) -> Result<MetricReport> {
    let mut rng = rng_for(seed, Stream::Predict);
    let dists = model.predict(&refs(windows), &mut rng)?;
    let items: Vec<Evaluated> = windows
        .iter()
        .zip(dists)
        .map(|(w, d)| Evaluated {
            domain_id: w.domain_id,
            y: w.y_raw.clone(),
            forecast: d,
        })
        .collect();
    let mut report = aggregate(&items, domains, split)?;
    report.variant = Some(model.variant().to_string());
    report.seed = Some(seed);
    Ok(report)
}

pub fn new_model(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Model> {
    let train = data.train_domains();
    Model::new(
        cfg.model.clone(),
        train.iter().map(|(id, _)| *id).collect(),
        train.into_iter().map(|(_, n)| n).collect(),
        &mut rng_for(seed, Stream::Init),
    )
}

pub struct ExperimentOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub train_report: MetricReport,
    pub test_report: MetricReport,
}

/// Splits, trains with the variant's schedule, and evaluates on the
/// training domains (configured region) and on the unseen test domains.
pub fn run_experiment(cfg: &ExperimentConfig, datasets: &[DomainDataset], seed: u64) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(datasets, cfg, seed)?;
    let mut model = new_model(cfg, &data, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let record = train_model(
        &mut model,
        &refs(&data.train),
        &refs(&data.val),
        &train_cfg,
        &mut rng_for(seed, Stream::Train),
    )?;
    let hash = cfg.hash();
    let mut train_report = evaluate_windows(
        &model,
        data.train_region(cfg.eval.train_region),
        &data.train_domains(),
        "train",
        seed,
    )?;
    let mut test_report = evaluate_windows(&model, &data.test, &data.test_domains(), "test", seed)?;
    train_report.config_hash = Some(hash.clone());
    test_report.config_hash = Some(hash);
    Ok(ExperimentOutcome {
        model,
        record,
        train_report,
        test_report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train: Option<MetricValues>,
    pub test: Option<MetricValues>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub domain_set: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub variant: Variant,
    pub config_hash: String,
    pub runs: Vec<SeedRun>,
    pub rows: Vec<AggregateRow>,
}

impl MultiSeedReport {
    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }

    pub fn row(&self, domain_set: &str, metric: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.domain_set == domain_set && r.metric == metric)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<6}  {:<8}  {:>12}  {:>12}  {:>7}\n", "set", "metric", "mean", "std", "n_seeds");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<6}  {:<8}  {:>12.6}  {:>12.6}  {:>7}",
                r.domain_set, r.metric, r.mean, r.std, r.n_seeds
            );
        }
        for r in self.runs.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(out, "seed {} failed: {}", r.seed, r.error.as_deref().unwrap_or_default());
        }
        out
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the experiment once per seed, each with a fresh domain split, and
/// aggregates the averaged metrics. Failed seeds are recorded and left out
/// of the aggregates.
pub fn multi_seed_evaluate(cfg: &ExperimentConfig, datasets: &[DomainDataset], seeds: &[u64]) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let runs: Vec<SeedRun> = seeds
        .iter()
        .map(|&seed| match run_experiment(cfg, datasets, seed) {
            Ok(o) => SeedRun {
                seed,
                train: Some(o.train_report.average),
                test: Some(o.test_report.average),
                error: None,
            },
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                SeedRun {
                    seed,
                    train: None,
                    test: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let mut rows = Vec::new();
    for set in ["train", "test"] {
        let vals: Vec<MetricValues> = runs
            .iter()
            .filter_map(|r| if set == "train" { r.train } else { r.test })
            .collect();
        if vals.is_empty() {
            continue;
        }
        for (k, metric) in MetricValues::NAMES.iter().enumerate() {
            let xs: Vec<f64> = vals.iter().map(|v| v.as_array()[k]).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(AggregateRow {
                domain_set: set.into(),
                metric: (*metric).into(),
                mean,
                std,
                n_seeds: xs.len(),
            });
        }
    }
    Ok(MultiSeedReport {
        variant: cfg.model.variant,
        config_hash: cfg.hash(),
        runs,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MultiSeedReport,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.report.failed()
    }
}

/// Multi-seed evaluation of each variant under an otherwise fixed config.
pub fn ablate(
    cfg: &ExperimentConfig,
    datasets: &[DomainDataset],
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::config("variants", "need at least one variant"));
    }
    variants
        .iter()
        .map(|&variant| {
            let mut c = cfg.clone();
            c.model.variant = variant;
            Ok(AblationRow {
                variant,
                report: multi_seed_evaluate(&c, datasets, seeds)?,
            })
        })
        .collect()
}

/// One row per variant with test-domain `mean ± std` per metric.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.variant.name().len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<w$}", "variant");
    for m in MetricValues::NAMES {
        let _ = write!(out, "  {m:>21}");
    }
    out.push_str("  status\n");
    for r in rows {
        let _ = write!(out, "{:<w$}", r.variant.name());
        for m in MetricValues::NAMES {
            match r.report.row("test", m) {
                Some(a) => {
                    let _ = write!(out, "  {:>21}", format!("{:.4} ± {:.4}", a.mean, a.std));
                }
                None => {
                    let _ = write!(out, "  {:>21}", "-");
                }
            }
        }
        let failures: Vec<String> = r
            .report
            .runs
            .iter()
            .filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)))
            .collect();
        if failures.is_empty() {
            out.push_str("  ok\n");
        } else {
            let _ = writeln!(out, "  failed ({})", failures.join("; "));
        }
    }
    out
}

/// CSV with columns `variant,<metric>_mean,<metric>_std,...,n_seeds,status`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant");
    for m in MetricValues::NAMES {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push_str(",n_seeds,status\n");
    for r in rows {
        out.push_str(r.variant.name());
        let mut n = 0;
        for m in MetricValues::NAMES {
            match r.report.row("test", m) {
                Some(a) => {
                    n = a.n_seeds;
                    let _ = write!(out, ",{:?},{:?}", a.mean, a.std);
                }
                None => out.push_str(",,"),
            }
        }
        let _ = writeln!(out, ",{n},{}", if r.failed() { "failed" } else { "ok" });
    }
    out
}
