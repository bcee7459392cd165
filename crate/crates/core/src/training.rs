//! Two-stage optimization, the joint (e2e) alternative, and model
//! selection on training-domain validation loss.

use std::time::Instant;

use dgf_grad::{Adam, AdamConfig, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::LatentNoise;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{Model, Phase, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the domain regularizer in the latent objective.
    pub reg_weight: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Stage-2 epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Learning-rate multiplier for the encoders during stage 2.
    pub encoder_lr_scale: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            reg_weight: 1.0,
            epochs_stage1: 100,
            epochs_stage2: 100,
            patience: 10,
            seed: 0,
            encoder_lr_scale: 1.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if variant.regularized() && self.batch_size < 2 {
            return Err(Error::config("batch_size", "the domain regularizer needs batches of at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config("reg_weight", "must be finite and nonnegative"));
        }
        if !(self.encoder_lr_scale >= 0.0 && self.encoder_lr_scale.is_finite()) {
            return Err(Error::config("encoder_lr_scale", "must be finite and nonnegative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> Adam {
        Adam::new(AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(self.learning_rate)
        })
    }
}

/// Loss curves and selection outcome of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub variant: Option<Variant>,
    /// Epoch-mean latent objective.
    pub stage1_loss: Vec<f64>,
    /// Epoch whose parameters were kept after stage 1.
    pub stage1_best_epoch: Option<usize>,
    /// Epoch-mean training loss of the forecasting stage (joint loss for e2e).
    pub stage2_train: Vec<f64>,
    pub stage2_val: Vec<f64>,
    /// Argmin of `stage2_val`.
    pub selected_epoch: Option<usize>,
    pub stage1_seconds: Vec<f64>,
    pub stage2_seconds: Vec<f64>,
}

impl RunRecord {
    pub fn best_val(&self) -> Option<f64> {
        self.selected_epoch.map(|e| self.stage2_val[e])
    }
}

fn shuffled_batches<'a, R: Rng + ?Sized>(
    windows: &[&'a WindowSample],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<&'a WindowSample>> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| windows[i]).collect())
        .collect()
}

fn finite_or_abort(value: f64, stage: &'static str, epoch: usize, batch: usize, terms: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            stage,
            epoch,
            batch,
            terms: terms(),
        })
    }
}

fn step(model: &mut Model, adam: &mut Adam, grads: &dgf_grad::Gradients) -> Result<()> {
    model.store.absorb(grads)?;
    adam.step(&mut model.store)?;
    Ok(())
}

/// Pretrains the CVAE pair on `latent_loss + reg_weight · Ω` and keeps the
/// parameters of the epoch with the lowest mean loss.
pub fn stage1_pretrain<R: Rng + ?Sized>(
    model: &mut Model,
    windows: &[&WindowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RunRecord> {
    cfg.validate(model.variant())?;
    if model.cvae.is_none() {
        return Err(Error::config("variant", "no_latent has nothing to pretrain"));
    }
    if windows.is_empty() {
        return Err(Error::Data("no training windows for pretraining".into()));
    }
    if model.variant().regularized() {
        let mut ds: Vec<usize> = windows.iter().map(|w| w.domain_id).collect();
        ds.sort_unstable();
        ds.dedup();
        if ds.len() < 2 {
            return Err(Error::Data("the domain regularizer needs at least two training domains".into()));
        }
    }
    model.set_phase(Phase::Pretrain, cfg.encoder_lr_scale);
    let mut adam = cfg.optimizer();
    let mut record = RunRecord {
        seed: cfg.seed,
        variant: Some(model.variant()),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let d_z = model.config.d_z;
    for epoch in 0..cfg.epochs_stage1 {
        let started = Instant::now();
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in shuffled_batches(windows, cfg.batch_size, rng).iter().enumerate() {
            let batch = model.batch(chunk)?;
            let noise = LatentNoise::sample(batch.len(), d_z, rng);
            let grads = {
                let g = Graph::new();
                let obj = model.latent_objective(&g, &batch, &noise, cfg.reg_weight)?;
                let total = obj.total.item();
                finite_or_abort(total, "stage 1", epoch, bi, || {
                    format!(
                        "combined={} bracket={} omega={:?}",
                        obj.terms.combined.item(),
                        obj.terms.bracket.item(),
                        obj.omega.map(|o| o.item())
                    )
                })?;
                sum += total * chunk.len() as f64;
                count += chunk.len();
                g.backward(obj.total)?
            };
            step(model, &mut adam, &grads)?;
        }
        let mean = sum / count as f64;
        record.stage1_loss.push(mean);
        record.stage1_seconds.push(started.elapsed().as_secs_f64());
        log::debug!("stage 1 epoch {epoch}: loss {mean:.6}");
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, model.store.clone()));
            record.stage1_best_epoch = Some(epoch);
        }
    }
    if let Some((_, store)) = best {
        model.store.copy_values_from(&store)?;
    }
    Ok(record)
}

/// Tracks the best validation epoch and decides when to stop.
struct EarlyStop {
    best: Option<(f64, usize, ParamStore)>,
    patience: usize,
}

impl EarlyStop {
    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, store: &ParamStore) -> bool {
        match &self.best {
            Some((b, _, _)) if val >= *b => {}
            _ => self.best = Some((val, epoch, store.clone())),
        }
        let best_epoch = self.best.as_ref().map(|b| b.1).unwrap_or(epoch);
        epoch - best_epoch >= self.patience
    }
}

fn validation_loss(model: &Model, val: &[&WindowSample], epoch: usize) -> Result<f64> {
    let v = model.evaluate_nll(val)?;
    finite_or_abort(v, "validation", epoch, 0, || format!("nll={v}"))?;
    Ok(v)
}

/// Trains the forecasting path with the encoders fine-tuned and the CVAE
/// decoders frozen. Early stopping keeps the best validation epoch.
pub fn stage2_train<R: Rng + ?Sized>(
    model: &mut Model,
    train: &[&WindowSample],
    val: &[&WindowSample],
    cfg: &TrainConfig,
    record: &mut RunRecord,
    rng: &mut R,
) -> Result<()> {
    cfg.validate(model.variant())?;
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    model.set_phase(Phase::Forecast, cfg.encoder_lr_scale);
    let mut adam = cfg.optimizer();
    let mut stop = EarlyStop {
        best: None,
        patience: cfg.patience.max(1),
    };
    for epoch in 0..cfg.epochs_stage2 {
        let started = Instant::now();
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in shuffled_batches(train, cfg.batch_size, rng).iter().enumerate() {
            let batch = model.batch(chunk)?;
            let grads = {
                let g = Graph::new();
                let z = model.forecast_latent(&g, &batch)?;
                let loss = model.forecast_loss(&g, &batch, z, true, rng)?;
                let v = loss.item();
                finite_or_abort(v, "stage 2", epoch, bi, || format!("nll={v}"))?;
                sum += v * chunk.len() as f64;
                count += chunk.len();
                g.backward(loss)?
            };
            step(model, &mut adam, &grads)?;
        }
        record.stage2_train.push(sum / count as f64);
        let v = validation_loss(model, val, epoch)?;
        record.stage2_val.push(v);
        record.stage2_seconds.push(started.elapsed().as_secs_f64());
        log::debug!("stage 2 epoch {epoch}: train {:.6} val {v:.6}", sum / count as f64);
        if stop.observe(epoch, v, &model.store) {
            break;
        }
    }
    if let Some((_, epoch, store)) = stop.best {
        model.store.copy_values_from(&store)?;
        record.selected_epoch = Some(epoch);
    }
    Ok(())
}

/// Joint optimization of `latent_loss + reg_weight · Ω + forecast NLL`
/// from scratch, with the same early stopping as stage 2.
pub fn train_e2e<R: Rng + ?Sized>(
    model: &mut Model,
    train: &[&WindowSample],
    val: &[&WindowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RunRecord> {
    cfg.validate(model.variant())?;
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    model.set_phase(Phase::Joint, cfg.encoder_lr_scale);
    let mut adam = cfg.optimizer();
    let mut record = RunRecord {
        seed: cfg.seed,
        variant: Some(model.variant()),
        ..Default::default()
    };
    let mut stop = EarlyStop {
        best: None,
        patience: cfg.patience.max(1),
    };
    let d_z = model.config.d_z;
    for epoch in 0..cfg.epochs_stage2 {
        let started = Instant::now();
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in shuffled_batches(train, cfg.batch_size, rng).iter().enumerate() {
            let batch = model.batch(chunk)?;
            let noise = LatentNoise::sample(batch.len(), d_z, rng);
            let grads = {
                let g = Graph::new();
                let obj = model.latent_objective(&g, &batch, &noise, cfg.reg_weight)?;
                let z = model.forecast_latent_from(&g, &obj.terms)?;
                let nll = model.forecast_loss(&g, &batch, z, true, rng)?;
                let total = obj.total.add(nll)?;
                let v = total.item();
                finite_or_abort(v, "e2e", epoch, bi, || {
                    format!("latent={} nll={}", obj.total.item(), nll.item())
                })?;
                sum += v * chunk.len() as f64;
                count += chunk.len();
                g.backward(total)?
            };
            step(model, &mut adam, &grads)?;
        }
        record.stage2_train.push(sum / count as f64);
        let v = validation_loss(model, val, epoch)?;
        record.stage2_val.push(v);
        record.stage2_seconds.push(started.elapsed().as_secs_f64());
        if stop.observe(epoch, v, &model.store) {
            break;
        }
    }
    if let Some((_, epoch, store)) = stop.best {
        model.store.copy_values_from(&store)?;
        record.selected_epoch = Some(epoch);
    }
    Ok(record)
}

/// Runs whichever schedule the model's variant calls for.
pub fn train_model<R: Rng + ?Sized>(
    model: &mut Model,
    train: &[&WindowSample],
    val: &[&WindowSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RunRecord> {
    let v = model.variant();
    if v == Variant::E2e {
        return train_e2e(model, train, val, cfg, rng);
    }
    let mut record = if v.two_stage() {
        stage1_pretrain(model, train, cfg, rng)?
    } else {
        RunRecord {
            seed: cfg.seed,
            variant: Some(v),
            ..Default::default()
        }
    };
    stage2_train(model, train, val, cfg, &mut record, rng)?;
    Ok(record)
}

/// One finished run as seen by model selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub val_loss: f64,
    pub beta: f64,
    pub hidden: usize,
}

/// Index of the run with the lowest validation loss. Ties go to the smaller
/// β, then the smaller hidden size, then the earlier run.
pub fn select_model(runs: &[Candidate]) -> Option<usize> {
    (0..runs.len()).min_by(|&a, &b| {
        let (ra, rb) = (&runs[a], &runs[b]);
        ra.val_loss
            .total_cmp(&rb.val_loss)
            .then(ra.beta.total_cmp(&rb.beta))
            .then(ra.hidden.cmp(&rb.hidden))
            .then(a.cmp(&b))
    })
}
