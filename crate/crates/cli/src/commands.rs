use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dgf_core::data::{generate_synthetic, write_csv, WindowSample};
use dgf_core::decomposition::decompose;
use dgf_core::evaluation::MetricReport;
use dgf_core::forecaster::QUANTILES;
use dgf_core::latent::{dump_latents, separation_score};
use dgf_core::model::{Model, Variant};
use dgf_core::pipeline::{
    ablate, ablation_csv, ablation_table, evaluate_windows, new_model, prepare_data, refs, rng_for, ExperimentConfig,
    PreparedData, Stream,
};
use dgf_core::training::{stage1_pretrain, stage2_train, train_e2e, RunRecord, TrainConfig};
use dgf_core::{Error, Result};

use crate::run::{default_dir, RunDir};
use crate::{Cli, Command, Overrides, SplitArg};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const RUN_RECORD: &str = "run_record.json";

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = &o.variant {
        cfg.model.variant = v.parse()?;
    }
    if let Some(p) = &o.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(e) = o.epochs_stage1 {
        cfg.train.epochs_stage1 = e;
    }
    if let Some(e) = o.epochs_stage2 {
        cfg.train.epochs_stage2 = e;
    }
    if let Some(lr) = o.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(b) = o.beta {
        cfg.model.beta = b;
    }
    Ok(cfg.resolved())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let name = cli.command.name();
    if !matches!(cli.command, Command::Synth | Command::Decompose { .. }) {
        cfg.validate()?;
    }
    let dir = cli.out.clone().unwrap_or_else(|| default_dir(name));
    let mut run = RunDir::create(dir, cli.overwrite, name, cli.config.clone(), &cfg)?;
    let outcome = match &cli.command {
        Command::Synth => synth(&cfg, &mut run),
        Command::Decompose { domain, series, kernel } => {
            decompose_series(&cfg, &mut run, domain.as_deref(), *series, kernel.unwrap_or(cfg.model.kernel))
        }
        Command::Pretrain => pretrain(&cfg, &mut run),
        Command::Train { pretrained } => train(&cfg, &mut run, pretrained.clone()),
        Command::Evaluate { checkpoint, split } => evaluate(&cfg, &mut run, checkpoint, *split),
        Command::Forecast { checkpoint, split } => forecast(&cfg, &mut run, checkpoint, *split),
        Command::DumpLatents { checkpoint, split } => latents(&cfg, &mut run, checkpoint, *split),
        Command::Ablate { variants, seeds } => ablation(&cfg, &mut run, variants, seeds),
    };
    run.finish(&outcome)?;
    outcome
}

fn synth(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let data = generate_synthetic(&cfg.data.synthetic)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &data)?;
    let path = run.write("dataset", "data.csv", buf)?;
    println!(
        "wrote {} domains x {} series to {}",
        data.len(),
        cfg.data.synthetic.series_per_domain,
        path.display()
    );
    Ok(())
}

fn decompose_series(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    domain: Option<&str>,
    series: usize,
    kernel: usize,
) -> Result<()> {
    let data = cfg.data.load()?;
    let ds = match domain {
        Some(name) => data
            .iter()
            .find(|d| d.domain_name == name)
            .ok_or_else(|| Error::Data(format!("no domain named `{name}`")))?,
        None => data.first().ok_or_else(|| Error::Data("dataset is empty".into()))?,
    };
    let s = ds
        .series
        .get(series)
        .ok_or_else(|| Error::Data(format!("domain `{}` has {} series", ds.domain_name, ds.series.len())))?;
    let parts = decompose(&s.values, kernel)?;
    let mut out = String::from("value,trend,seasonal\n");
    for i in 0..s.len() {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?}",
            s.values[i], parts.trend[i], parts.seasonal[i]
        );
    }
    let path = run.write("decomposition", "decomposition.csv", out)?;
    println!("decomposed {}/{} with kernel {kernel} into {}", ds.domain_name, s.name, path.display());
    Ok(())
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.train.seed
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    cfg.train.clone()
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    prepare_data(&cfg.data.load()?, cfg, seed(cfg))
}

fn save_model(run: &mut RunDir, model: &Model, record: &RunRecord) -> Result<()> {
    let ck = run.file(CHECKPOINT);
    model.save(&ck)?;
    run.record("checkpoint", &ck);
    run.write("run_record", RUN_RECORD, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let v = cfg.model.variant;
    if !v.two_stage() {
        return Err(Error::config("variant", format!("`{v}` has no pretraining stage; run `dgf train` directly")));
    }
    let data = prepare(cfg)?;
    let mut model = new_model(cfg, &data, seed(cfg))?;
    let record = stage1_pretrain(
        &mut model,
        &refs(&data.train),
        &train_config(cfg),
        &mut rng_for(seed(cfg), Stream::Train),
    )?;
    save_model(run, &model, &record)?;
    println!(
        "stage 1: {} epochs, best epoch {:?}, loss {:.6}",
        record.stage1_loss.len(),
        record.stage1_best_epoch,
        record.stage1_best_epoch.map_or(f64::NAN, |e| record.stage1_loss[e])
    );
    Ok(())
}

/// Loads a checkpoint and checks that it belongs to this config and split.
fn load_checked(path: &Path, cfg: &ExperimentConfig, data: &PreparedData) -> Result<Model> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    let model = Model::load(path)?;
    let mut ours = cfg.model.clone();
    ours.encoder = Some(ours.encoder_kind());
    let mut theirs = model.config.clone();
    theirs.encoder = Some(theirs.encoder_kind());
    if ours != theirs {
        return Err(Error::config(
            "model",
            format!("the [model] settings differ from the checkpoint at {}", path.display()),
        ));
    }
    if model.train_domains != data.split.train_domains {
        return Err(Error::config(
            "seed",
            format!(
                "checkpoint was trained on domains {:?} but this seed's split trains on {:?}",
                model.train_domains, data.split.train_domains
            ),
        ));
    }
    Ok(model)
}

fn train(cfg: &ExperimentConfig, run: &mut RunDir, pretrained: Option<PathBuf>) -> Result<()> {
    let v = cfg.model.variant;
    let data = prepare(cfg)?;
    let tc = train_config(cfg);
    let mut rng = rng_for(seed(cfg), Stream::Train);
    let (train, val) = (refs(&data.train), refs(&data.val));
    let (model, record) = if v.two_stage() {
        let path = pretrained.unwrap_or_else(|| default_dir("pretrain").join(CHECKPOINT));
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "stage-1 checkpoint not found at {}; run `dgf pretrain` first or pass --pretrained",
                path.display()
            )));
        }
        let mut model = load_checked(&path, cfg, &data)?;
        let mut record = path
            .parent()
            .map(|p| p.join(RUN_RECORD))
            .filter(|p| p.exists())
            .map(|p| -> Result<RunRecord> { Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?) })
            .transpose()?
            .unwrap_or_default();
        record.seed = tc.seed;
        record.variant = Some(v);
        stage2_train(&mut model, &train, &val, &tc, &mut record, &mut rng)?;
        (model, record)
    } else {
        let mut model = new_model(cfg, &data, seed(cfg))?;
        let record = if v == Variant::E2e {
            train_e2e(&mut model, &train, &val, &tc, &mut rng)?
        } else {
            let mut record = RunRecord {
                seed: tc.seed,
                variant: Some(v),
                ..Default::default()
            };
            stage2_train(&mut model, &train, &val, &tc, &mut record, &mut rng)?;
            record
        };
        (model, record)
    };
    save_model(run, &model, &record)?;
    println!(
        "{v}: {} epochs, selected epoch {:?}, validation loss {:.6}",
        record.stage2_val.len(),
        record.selected_epoch,
        record.best_val().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_report(run: &mut RunDir, report: &MetricReport) -> Result<()> {
    let stem = format!("report_{}", report.split);
    run.write("report", &format!("{stem}.json"), report.to_json()?)?;
    run.write("report", &format!("{stem}.txt"), report.to_table())?;
    run.write("report", &format!("{stem}.csv"), report.to_csv())?;
    println!("{} domains ({}):\n{}", report.split, report.variant.as_deref().unwrap_or("?"), report.to_table());
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn splits(split: SplitArg) -> &'static [&'static str] {
    match split {
        SplitArg::Train => &["train"],
        SplitArg::Test => &["test"],
        SplitArg::Both => &["train", "test"],
    }
}

fn evaluate(cfg: &ExperimentConfig, run: &mut RunDir, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let data = prepare(cfg)?;
    let model = load_checked(checkpoint, cfg, &data)?;
    for &s in splits(split) {
        let (windows, domains) = if s == "train" {
            (data.train_region(cfg.eval.train_region), data.train_domains())
        } else {
            (data.test.as_slice(), data.test_domains())
        };
        let mut report = evaluate_windows(&model, windows, &domains, s, seed(cfg))?;
        report.config_hash = Some(cfg.hash());
        write_report(run, &report)?;
    }
    Ok(())
}

/// Windows of a domain set. For the training domains every region is used.
fn windows_for(data: &PreparedData, split: SplitArg) -> Vec<&WindowSample> {
    let train = || data.train.iter().chain(&data.val).chain(&data.holdout);
    match split {
        SplitArg::Train => train().collect(),
        SplitArg::Test => data.test.iter().collect(),
        SplitArg::Both => train().chain(&data.test).collect(),
    }
}

fn forecast(cfg: &ExperimentConfig, run: &mut RunDir, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let data = prepare(cfg)?;
    let model = load_checked(checkpoint, cfg, &data)?;
    let windows = if split == SplitArg::Train {
        refs(data.train_region(cfg.eval.train_region))
    } else {
        windows_for(&data, split)
    };
    let dists = model.predict(&windows, &mut rng_for(seed(cfg), Stream::Predict))?;
    let names: std::collections::BTreeMap<usize, &str> = data.names.iter().map(|(i, n)| (*i, n.as_str())).collect();
    let mut out = String::from("domain,series,origin,step,actual,point");
    for q in QUANTILES {
        let _ = write!(out, ",q{q}");
    }
    out.push('\n');
    for (w, d) in windows.iter().zip(&dists) {
        for step in 0..w.horizon() {
            let _ = write!(
                out,
                "{},{},{},{},{:?},{:?}",
                names[&w.domain_id],
                w.series,
                w.origin,
                step + 1,
                w.y_raw[step],
                d.point[step]
            );
            for row in &d.quantiles {
                let _ = write!(out, ",{:?}", row[step]);
            }
            out.push('\n');
        }
    }
    let path = run.write("forecasts", "forecasts.csv", out)?;
    if let Some(w) = dists.iter().find_map(|d| d.warning.as_ref()) {
        println!("warning: {w}");
    }
    println!("wrote {} forecasts to {}", dists.len(), path.display());
    Ok(())
}

fn latents(cfg: &ExperimentConfig, run: &mut RunDir, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let data = prepare(cfg)?;
    let model = load_checked(checkpoint, cfg, &data)?;
    let windows = windows_for(&data, split);
    let dump = dump_latents(&model, &windows, Some((cfg.model.d_z, cfg.model.alpha)))?;
    let mut buf = Vec::new();
    dump.write_csv(&mut buf)?;
    let path = run.write("latents", "latents.csv", buf)?;
    println!("wrote {} latent rows to {}", dump.rows.len(), path.display());
    let mut line = String::new();
    match separation_score(&dump) {
        Ok(score) => {
            run.write("separation", "separation.json", serde_json::to_string_pretty(&score)?)?;
            let _ = writeln!(
                line,
                "separation: shared_ratio {:.6}{}, specific_ratio {:.6}{}",
                score.shared_ratio,
                if score.shared_degenerate { " (degenerate)" } else { "" },
                score.specific_ratio,
                if score.specific_degenerate { " (degenerate)" } else { "" },
            );
            for w in &score.warnings {
                let _ = writeln!(line, "warning: {w}");
            }
        }
        // The dump is still useful when the score is undefined.
        Err(Error::Data(reason)) => {
            let _ = writeln!(line, "warning: separation score unavailable: {reason}");
        }
        Err(e) => return Err(e),
    }
    print!("{line}");
    let report = run.file("report.txt");
    let mut text = std::fs::read_to_string(&report).unwrap_or_default();
    text.push_str(&line);
    run.write("report", "report.txt", text)?;
    Ok(())
}

fn ablation(cfg: &ExperimentConfig, run: &mut RunDir, variants: &[String], seeds: &[u64]) -> Result<()> {
    let variants = variants
        .iter()
        .map(|v| v.trim().parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let data = cfg.data.load()?;
    let rows = ablate(cfg, &data, &variants, seeds)?;
    let table = ablation_table(&rows);
    run.write("ablation", "ablation.txt", &table)?;
    run.write("ablation", "ablation.csv", ablation_csv(&rows))?;
    run.write("ablation", "ablation.json", serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    let failed: Vec<&str> = rows.iter().filter(|r| r.failed()).map(|r| r.variant.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Training(format!("variants with failed seeds: {}", failed.join(", "))))
    }
}
