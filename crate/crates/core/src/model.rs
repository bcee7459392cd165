//! The assembled forecaster: CVAE pair, input augmentation and decoder in
//! one parameter store, plus checkpoint I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dgf_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    domain_regularizer, split_batch, split_index, Component, CvaeConfig, CvaePair, EncoderKind,
    LatentBatch, LatentNoise, LatentTerms,
};
use crate::data::{one_hot_domain, WindowSample};
use crate::decomposition::decompose;
use crate::error::{Error, Result};
use crate::forecaster::{
    fuse_latents, gaussian_nll, to_distribution, Augment, DecodeInput, Decoder, DecoderConfig,
    DecoderKind, DecoderOutput, ForecastDistribution, LinearDecoder, RecurrentDecoder,
};

/// Checkpoint layout version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Windows per forward pass at inference.
const INFERENCE_CHUNK: usize = 64;

/// Model variants. `Full` is the complete method; the others each remove or
/// alter one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One joint optimization loop instead of two stages.
    E2e,
    /// No domain regularizer in the latent objective.
    NoReg,
    /// A single VAE on the raw window.
    NoDecomp,
    /// Only the shared latent coordinates reach the forecaster.
    SharedOnly,
    /// Decoders without the domain one-hot.
    NoCond,
    /// Latent pathway disabled: the forecaster sees `z = 0`.
    NoLatent,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::E2e,
        Variant::NoReg,
        Variant::NoDecomp,
        Variant::SharedOnly,
        Variant::NoCond,
        Variant::NoLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::E2e => "e2e",
            Variant::NoReg => "no_reg",
            Variant::NoDecomp => "no_decomp",
            Variant::SharedOnly => "shared_only",
            Variant::NoCond => "no_cond",
            Variant::NoLatent => "no_latent",
        }
    }

    pub fn has_latent(self) -> bool {
        self != Variant::NoLatent
    }

    pub fn two_stage(self) -> bool {
        self != Variant::E2e && self.has_latent()
    }

    pub fn regularized(self) -> bool {
        self.has_latent() && self != Variant::NoReg
    }

    pub fn decomposed(self) -> bool {
        self != Variant::NoDecomp
    }

    pub fn conditional(self) -> bool {
        self != Variant::NoCond
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = if s == "base" { "no_latent" } else { s };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config("variant", format!("unknown `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub beta: f64,
    pub alpha: f64,
    pub dropout: f64,
    /// Defaults to a bidirectional GRU for the linear decoder and an MLP
    /// for the recurrent one.
    pub encoder: Option<EncoderKind>,
    pub decoder: DecoderKind,
    pub sample_paths: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 60,
            horizon: 14,
            feature_dim: 0,
            d_z: 8,
            hidden: 16,
            kernel: crate::decomposition::DEFAULT_KERNEL,
            beta: 1.0,
            alpha: 0.5,
            dropout: 0.3,
            encoder: None,
            decoder: DecoderKind::Linear,
            sample_paths: 100,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn encoder_kind(&self) -> EncoderKind {
        self.encoder.unwrap_or(match self.decoder {
            DecoderKind::Linear => EncoderKind::BiGru,
            DecoderKind::Recurrent => EncoderKind::Mlp,
        })
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            kind: self.decoder,
            hidden: self.hidden,
            dropout: self.dropout,
            sample_paths: self.sample_paths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::config("lookback", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.d_z == 0 {
            return Err(Error::config("d_z", "must be at least 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::EvenKernel(self.kernel));
        }
        if self.kernel > self.lookback {
            return Err(Error::KernelTooLarge {
                kernel: self.kernel,
                len: self.lookback,
            });
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("beta", "must be finite and nonnegative"));
        }
        split_index(self.alpha, self.d_z)?;
        self.decoder_config().validate()
    }
}

/// Which parameter groups an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// CVAE encoders and decoders only.
    Pretrain,
    /// Encoders, augmentation and forecasting decoder; CVAE decoders frozen.
    Forecast,
    /// Everything.
    Joint,
}

/// Tensors for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub x_trend: Tensor,
    pub x_seasonal: Tensor,
    pub features: Option<Tensor>,
    /// `B x 1` last lookback value.
    pub last: Tensor,
    pub y: Tensor,
    /// Dataset domain id of each row.
    pub domains: Vec<usize>,
    /// Present when every row comes from a training domain.
    pub one_hot: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn latent_batch(&self) -> Result<LatentBatch> {
        let one_hot = self
            .one_hot
            .clone()
            .ok_or_else(|| Error::Data("latent objective needs windows from training domains".into()))?;
        // Positions in the one-hot encoding, not dataset ids.
        let m = one_hot.shape()[1];
        let domains = one_hot
            .data()
            .chunks(m)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect();
        Ok(LatentBatch {
            x: self.x.clone(),
            x_trend: self.x_trend.clone(),
            x_seasonal: self.x_seasonal.clone(),
            one_hot,
            domains,
        })
    }
}

/// Terms of a latent objective evaluation, each a batch mean.
#[derive(Debug, Clone, Copy)]
pub struct LatentObjective<'g> {
    pub terms: LatentTerms<'g>,
    pub omega: Option<Var<'g>>,
    pub total: Var<'g>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// Dataset ids of the training domains, in one-hot order.
    pub train_domains: Vec<usize>,
    /// Names matching `train_domains`.
    pub train_domain_names: Vec<String>,
    pub store: ParamStore,
    pub cvae: Option<CvaePair>,
    pub augment: Augment,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        train_domains: Vec<usize>,
        train_domain_names: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if train_domains.len() != train_domain_names.len() {
            return Err(Error::Length {
                what: "training domain names",
                expected: train_domains.len(),
                actual: train_domain_names.len(),
            });
        }
        let mut store = ParamStore::new();
        let v = config.variant;
        let cvae = if v.has_latent() {
            Some(CvaePair::new(
                &mut store,
                CvaeConfig {
                    lookback: config.lookback,
                    d_z: config.d_z,
                    hidden: config.hidden,
                    beta: config.beta,
                    alpha: config.alpha,
                    encoder: config.encoder_kind(),
                    num_domains: train_domains.len(),
                    conditional: v.conditional(),
                    single: !v.decomposed(),
                },
                rng,
            )?)
        } else {
            None
        };
        let augment = Augment::new(&mut store, config.d_z, config.lookback, rng);
        let decoder = match config.decoder {
            DecoderKind::Linear => Decoder::Linear(LinearDecoder::new(
                &mut store,
                config.lookback,
                config.horizon,
                config.kernel,
                rng,
            )?),
            DecoderKind::Recurrent => Decoder::Recurrent(RecurrentDecoder::new(
                &mut store,
                config.hidden,
                config.feature_dim,
                config.horizon,
                rng,
            )),
        };
        Ok(Self {
            config,
            train_domains,
            train_domain_names,
            store,
            cvae,
            augment,
            decoder,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// One-hot position of a dataset domain id, if it is a training domain.
    pub fn domain_index(&self, domain_id: usize) -> Option<usize> {
        self.train_domains.iter().position(|&d| d == domain_id)
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.cvae.as_ref().map(|c| c.encoder_params()).unwrap_or_default()
    }

    pub fn cvae_decoder_params(&self) -> Vec<ParamId> {
        self.cvae.as_ref().map(|c| c.decoder_params()).unwrap_or_default()
    }

    pub fn forecaster_params(&self) -> Vec<ParamId> {
        let mut ids = self.augment.params().to_vec();
        ids.extend(self.decoder.params());
        ids
    }

    /// Sets trainability and learning-rate scales for a training phase.
    pub fn set_phase(&mut self, phase: Phase, encoder_lr_scale: f64) {
        let (enc, dec, fc) = match phase {
            Phase::Pretrain => (true, true, false),
            Phase::Forecast => (true, false, true),
            Phase::Joint => (true, true, true),
        };
        let enc_scale = if phase == Phase::Forecast { encoder_lr_scale } else { 1.0 };
        for id in self.encoder_params() {
            self.store.set_trainable(id, enc);
            self.store.set_lr_scale(id, enc_scale);
        }
        for id in self.cvae_decoder_params() {
            self.store.set_trainable(id, dec);
        }
        for id in self.forecaster_params() {
            self.store.set_trainable(id, fc);
        }
    }

    /// Stacks windows into batch tensors. Windows must already be prepared
    /// (scaled and normalized).
    pub fn batch(&self, windows: &[&WindowSample]) -> Result<Batch> {
        let (t, h) = (self.config.lookback, self.config.horizon);
        let fd = self.config.feature_dim;
        let b = windows.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut x = Vec::with_capacity(b * t);
        let mut xt = Vec::with_capacity(b * t);
        let mut xs = Vec::with_capacity(b * t);
        let mut y = Vec::with_capacity(b * h);
        let mut a = Vec::with_capacity(b * t * fd);
        let mut last = Vec::with_capacity(b);
        let mut domains = Vec::with_capacity(b);
        let mut one_hot = Some(Vec::with_capacity(b * self.train_domains.len()));
        for w in windows {
            if w.x.len() != t {
                return Err(Error::Length {
                    what: "lookback",
                    expected: t,
                    actual: w.x.len(),
                });
            }
            if w.y.len() != h {
                return Err(Error::Length {
                    what: "horizon",
                    expected: h,
                    actual: w.y.len(),
                });
            }
            let parts = decompose(&w.x, self.config.kernel)?;
            x.extend_from_slice(&w.x);
            xt.extend_from_slice(&parts.trend);
            xs.extend_from_slice(&parts.seasonal);
            y.extend_from_slice(&w.y);
            last.push(w.x[t - 1]);
            if fd > 0 {
                if w.a.len() != t * fd {
                    return Err(Error::Length {
                        what: "external features",
                        expected: t * fd,
                        actual: w.a.len(),
                    });
                }
                a.extend_from_slice(&w.a);
            }
            domains.push(w.domain_id);
            one_hot = match (one_hot, self.domain_index(w.domain_id)) {
                (Some(mut v), Some(i)) => {
                    v.extend(one_hot_domain(i, self.train_domains.len())?);
                    Some(v)
                }
                _ => None,
            };
        }
        let m = self.train_domains.len();
        Ok(Batch {
            x: Tensor::matrix(b, t, x)?,
            x_trend: Tensor::matrix(b, t, xt)?,
            x_seasonal: Tensor::matrix(b, t, xs)?,
            features: if fd > 0 { Some(Tensor::matrix(b, t * fd, a)?) } else { None },
            last: Tensor::matrix(b, 1, last)?,
            y: Tensor::matrix(b, h, y)?,
            domains,
            one_hot: match one_hot {
                Some(v) if m > 0 => Some(Tensor::matrix(b, m, v)?),
                _ => None,
            },
        })
    }

    fn cvae(&self) -> Result<&CvaePair> {
        self.cvae
            .as_ref()
            .ok_or_else(|| Error::config("variant", "the no_latent variant has no CVAE"))
    }

    /// Latent objective plus `reg_weight · Ω`. Ω is skipped for single-row
    /// batches and for the no_reg variant.
    pub fn latent_objective<'g>(
        &self,
        g: &'g Graph,
        batch: &Batch,
        noise: &LatentNoise,
        reg_weight: f64,
    ) -> Result<LatentObjective<'g>> {
        let cvae = self.cvae()?;
        let terms = cvae.latent_loss(g, &self.store, &batch.latent_batch()?, noise)?;
        let omega = if self.variant().regularized() && batch.len() >= 2 {
            let idx = split_index(self.config.alpha, self.config.d_z)?;
            let (sh, sp) = split_batch(terms.trend.z, terms.seasonal.map(|p| p.z), idx)?;
            Some(domain_regularizer(sh, sp, &batch.domains)?)
        } else {
            None
        };
        let total = match omega {
            Some(o) => terms.total.add(o.scale(reg_weight))?,
            None => terms.total,
        };
        Ok(LatentObjective { terms, omega, total })
    }

    /// Applies fusion and the shared-only mask to encoder outputs.
    fn fused<'g>(&self, g: &'g Graph, z_t: Var<'g>, z_s: Option<Var<'g>>) -> Result<Var<'g>> {
        let z = match z_s {
            Some(z_s) => fuse_latents(z_t, z_s)?,
            None => z_t,
        };
        if self.variant() != Variant::SharedOnly {
            return Ok(z);
        }
        let idx = split_index(self.config.alpha, self.config.d_z)?;
        let mask: Vec<f64> = (0..self.config.d_z).map(|i| if i < idx { 1.0 } else { 0.0 }).collect();
        let rows = z.shape()[0];
        let mask = g.constant(Tensor::matrix(rows, self.config.d_z, mask.repeat(rows))?);
        Ok(z.mul(mask)?)
    }

    /// The latent that enters the augmentation, using posterior means.
    pub fn forecast_latent<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<Var<'g>> {
        let Some(cvae) = &self.cvae else {
            return Ok(g.constant(Tensor::zeros(&[batch.len(), self.config.d_z])));
        };
        if cvae.seasonal.is_some() {
            let t = cvae.encode(g, &self.store, g.constant(batch.x_trend.clone()), Component::Trend, None)?;
            let s = cvae.encode(
                g,
                &self.store,
                g.constant(batch.x_seasonal.clone()),
                Component::Seasonal,
                None,
            )?;
            self.fused(g, t.z, Some(s.z))
        } else {
            let t = cvae.encode(g, &self.store, g.constant(batch.x.clone()), Component::Trend, None)?;
            self.fused(g, t.z, None)
        }
    }

    /// Latent entering the augmentation for a joint objective, reusing the
    /// posterior means from an existing latent evaluation.
    pub fn forecast_latent_from<'g>(&self, g: &'g Graph, terms: &LatentTerms<'g>) -> Result<Var<'g>> {
        self.fused(g, terms.trend.mu, terms.seasonal.map(|p| p.mu))
    }

    fn decode_input<'g>(&self, g: &'g Graph, batch: &Batch, z: Var<'g>) -> Result<DecodeInput<'g>> {
        let x_prime = self.augment.forward(g, &self.store, z, g.constant(batch.x.clone()))?;
        Ok(DecodeInput {
            x_prime,
            features: batch.features.clone().map(|a| g.constant(a)),
            last: g.constant(batch.last.clone()),
        })
    }

    /// Predictive `(mu, sigma)` under teacher forcing. Dropout is active
    /// only when `train` is set.
    pub fn forecast_params<'g, R: Rng + ?Sized>(
        &self,
        g: &'g Graph,
        batch: &Batch,
        z: Var<'g>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let input = self.decode_input(g, batch, z)?;
        match &self.decoder {
            Decoder::Linear(d) => d.forward(g, &self.store, input.x_prime),
            Decoder::Recurrent(d) => {
                let p = if train { self.config.dropout } else { 0.0 };
                d.forward_train(g, &self.store, &input, g.constant(batch.y.clone()), p, rng)
            }
        }
    }

    /// Gaussian NLL of the targets given latent `z`.
    pub fn forecast_loss<'g, R: Rng + ?Sized>(
        &self,
        g: &'g Graph,
        batch: &Batch,
        z: Var<'g>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var<'g>> {
        let (mu, sigma) = self.forecast_params(g, batch, z, train, rng)?;
        gaussian_nll(g.constant(batch.y.clone()), mu, sigma)
    }

    /// Mean validation NLL over windows, without dropout.
    pub fn evaluate_nll(&self, windows: &[&WindowSample]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Data("no windows to evaluate".into()));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut total = 0.0;
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let batch = self.batch(chunk)?;
            let g = Graph::new();
            let z = self.forecast_latent(&g, &batch)?;
            total += self.forecast_loss(&g, &batch, z, false, &mut rng)?.item() * chunk.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }

    /// Forecast distributions in original units, one per window.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        windows: &[&WindowSample],
        rng: &mut R,
    ) -> Result<Vec<ForecastDistribution>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let batch = self.batch(chunk)?;
            let outputs: Vec<DecoderOutput> = match &self.decoder {
                Decoder::Linear(d) => {
                    let g = Graph::new();
                    let z = self.forecast_latent(&g, &batch)?;
                    let input = self.decode_input(&g, &batch, z)?;
                    let (mu, sigma) = d.forward(&g, &self.store, input.x_prime)?;
                    let h = self.config.horizon;
                    let (mu, sigma) = (mu.to_vec(), sigma.to_vec());
                    (0..chunk.len())
                        .map(|i| DecoderOutput::Gaussian {
                            mu: mu[i * h..(i + 1) * h].to_vec(),
                            sigma: sigma[i * h..(i + 1) * h].to_vec(),
                        })
                        .collect()
                }
                Decoder::Recurrent(d) => {
                    let x_prime = {
                        let g = Graph::new();
                        let z = self.forecast_latent(&g, &batch)?;
                        self.decode_input(&g, &batch, z)?.x_prime.value()
                    };
                    let paths = d.sample(
                        &self.store,
                        &x_prime,
                        batch.features.as_ref(),
                        batch.last.data(),
                        self.config.sample_paths,
                        rng,
                    )?;
                    paths.into_iter().map(DecoderOutput::Samples).collect()
                }
            };
            for (w, o) in chunk.iter().zip(outputs) {
                out.push(to_distribution(o, w.scale, w.norm_stats)?);
            }
        }
        Ok(out)
    }

    /// Posterior means `(mu_t, mu_s)` per window. With a single stack the
    /// second entry is `None`.
    pub fn encode_means(&self, windows: &[&WindowSample]) -> Result<Vec<(Vec<f64>, Option<Vec<f64>>)>> {
        let cvae = self.cvae()?;
        let d = self.config.d_z;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let batch = self.batch(chunk)?;
            let g = Graph::new();
            let (t, s) = if cvae.seasonal.is_some() {
                let t = cvae.encode(&g, &self.store, g.constant(batch.x_trend.clone()), Component::Trend, None)?;
                let s = cvae.encode(
                    &g,
                    &self.store,
                    g.constant(batch.x_seasonal.clone()),
                    Component::Seasonal,
                    None,
                )?;
                (t.mu.to_vec(), Some(s.mu.to_vec()))
            } else {
                let t = cvae.encode(&g, &self.store, g.constant(batch.x.clone()), Component::Trend, None)?;
                (t.mu.to_vec(), None)
            };
            for i in 0..chunk.len() {
                out.push((
                    t[i * d..(i + 1) * d].to_vec(),
                    s.as_ref().map(|s| s[i * d..(i + 1) * d].to_vec()),
                ));
            }
        }
        Ok(out)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = CheckpointRef {
            format_version: CHECKPOINT_VERSION,
            model: self,
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.config.validate()?;
        Ok(ck.model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    model: &'a Model,
}

#[derive(Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: Model,
}
