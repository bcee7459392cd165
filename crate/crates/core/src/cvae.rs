//! Paired conditional β-VAEs over the trend and seasonal parts of a window.
//!
//! Encoders see only the component values. Decoders are a single linear
//! layer over `concat(z, one_hot(domain))`, so the domain identifier is
//! needed for reconstruction but never for encoding.

use dgf_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GruCell, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// One tanh hidden layer, then mean and log-variance heads.
    Mlp,
    /// Forward and backward GRUs over the window; their final states feed
    /// the two heads.
    BiGru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Trend,
    Seasonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Mlp {
        hidden: Linear,
        mu: Linear,
        logvar: Linear,
    },
    BiGru {
        forward: GruCell,
        backward: GruCell,
        mu: Linear,
        logvar: Linear,
    },
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: EncoderKind,
        lookback: usize,
        hidden: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            EncoderKind::Mlp => Encoder::Mlp {
                hidden: Linear::new(store, &format!("{name}.hidden"), lookback, hidden, rng),
                mu: Linear::new(store, &format!("{name}.mu"), hidden, d_z, rng),
                logvar: Linear::new(store, &format!("{name}.logvar"), hidden, d_z, rng),
            },
            EncoderKind::BiGru => Encoder::BiGru {
                forward: GruCell::new(store, &format!("{name}.fwd"), 1, hidden, rng),
                backward: GruCell::new(store, &format!("{name}.bwd"), 1, hidden, rng),
                mu: Linear::new(store, &format!("{name}.mu"), 2 * hidden, d_z, rng),
                logvar: Linear::new(store, &format!("{name}.logvar"), 2 * hidden, d_z, rng),
            },
        }
    }

    /// Maps a `B x T` batch to `(mu, logvar)`, each `B x d_z`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let features = match self {
            Encoder::Mlp { hidden, .. } => hidden.forward(g, store, x)?.tanh(),
            Encoder::BiGru {
                forward, backward, ..
            } => {
                let shape = x.shape();
                let (batch, t) = (shape[0], shape[1]);
                let mut hf = forward.initial_state(g, batch);
                let mut hb = backward.initial_state(g, batch);
                for i in 0..t {
                    hf = forward.step(g, store, x.slice_last(i..i + 1)?, hf)?;
                    hb = backward.step(g, store, x.slice_last(t - 1 - i..t - i)?, hb)?;
                }
                g.concat(&[hf, hb])?
            }
        };
        let (Encoder::Mlp { mu, logvar, .. } | Encoder::BiGru { mu, logvar, .. }) = self;
        Ok((
            mu.forward(g, store, features)?,
            logvar.forward(g, store, features)?,
        ))
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Encoder::Mlp { hidden, mu, logvar } => {
                [hidden.params(), mu.params(), logvar.params()].concat()
            }
            Encoder::BiGru {
                forward,
                backward,
                mu,
                logvar,
            } => [
                &forward.params()[..],
                &backward.params(),
                &mu.params(),
                &logvar.params(),
            ]
            .concat(),
        }
    }
}

/// One encoder/decoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub encoder: Encoder,
    pub decoder: Linear,
}

/// Hyperparameters of a [`CvaePair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub lookback: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub beta: f64,
    pub alpha: f64,
    pub encoder: EncoderKind,
    /// Number of training domains, i.e. the one-hot width.
    pub num_domains: usize,
    /// Whether decoders receive the domain one-hot.
    pub conditional: bool,
    /// One stack on the raw window instead of a trend/seasonal pair.
    pub single: bool,
}

/// The trend and seasonal stacks. With `single` set there is only the
/// trend slot, which then models the undecomposed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaePair {
    pub config: CvaeConfig,
    pub trend: Vae,
    pub seasonal: Option<Vae>,
}

/// Per-batch inputs to [`CvaePair::latent_loss`].
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// `B x T` windows.
    pub x: Tensor,
    pub x_trend: Tensor,
    pub x_seasonal: Tensor,
    /// `B x M` one-hot training-domain rows.
    pub one_hot: Tensor,
    /// Domain of each row, used by the regularizer.
    pub domains: Vec<usize>,
}

/// Standard-normal draws for the reparameterization of each stack.
#[derive(Debug, Clone)]
pub struct LatentNoise {
    pub trend: Tensor,
    pub seasonal: Tensor,
}

impl LatentNoise {
    pub fn zeros(batch: usize, d_z: usize) -> Self {
        Self {
            trend: Tensor::zeros(&[batch, d_z]),
            seasonal: Tensor::zeros(&[batch, d_z]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(batch: usize, d_z: usize, rng: &mut R) -> Self {
        let mut draw = || {
            let data = (0..batch * d_z)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Tensor::new(vec![batch, d_z], data).expect("shape matches length")
        };
        let trend = draw();
        let seasonal = draw();
        Self { trend, seasonal }
    }
}

/// Encoded posterior parameters and drawn latents for one stack.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'g> {
    pub mu: Var<'g>,
    pub logvar: Var<'g>,
    pub z: Var<'g>,
}

/// Vector form of a [`Posterior`] for a single window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

/// The terms of the latent objective, each already averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LatentTerms<'g> {
    /// `Σ_T (x̂_t + x̂_s − x)²`.
    pub combined: Var<'g>,
    /// Component reconstruction NLLs plus KLs; multiplied by β in `total`.
    pub bracket: Var<'g>,
    pub total: Var<'g>,
    pub trend: Posterior<'g>,
    pub seasonal: Option<Posterior<'g>>,
}

impl CvaePair {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: CvaeConfig, rng: &mut R) -> Result<Self> {
        if config.lookback == 0 || config.d_z == 0 || config.hidden == 0 {
            return Err(Error::config("model", "lookback, d_z and hidden must be positive"));
        }
        if !(config.beta >= 0.0 && config.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and nonnegative"));
        }
        split_index(config.alpha, config.d_z)?;
        if config.conditional && config.num_domains == 0 {
            return Err(Error::config("num_domains", "conditional decoders need at least one domain"));
        }
        let dec_in = config.d_z + if config.conditional { config.num_domains } else { 0 };
        let mut stack = |name: &str| Vae {
            encoder: Encoder::new(
                store,
                &format!("{name}.encoder"),
                config.encoder,
                config.lookback,
                config.hidden,
                config.d_z,
                rng,
            ),
            decoder: Linear::new(store, &format!("{name}.decoder"), dec_in, config.lookback, rng),
        };
        if config.single {
            Ok(Self {
                config,
                trend: stack("vae"),
                seasonal: None,
            })
        } else {
            let trend = stack("trend");
            let seasonal = Some(stack("seasonal"));
            Ok(Self {
                config,
                trend,
                seasonal,
            })
        }
    }

    fn stack(&self, which: Component) -> Result<&Vae> {
        match which {
            Component::Trend => Ok(&self.trend),
            Component::Seasonal => self
                .seasonal
                .as_ref()
                .ok_or_else(|| Error::config("variant", "this model has no seasonal stack")),
        }
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.trend.encoder.params();
        if let Some(s) = &self.seasonal {
            ids.extend(s.encoder.params());
        }
        ids
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.trend.decoder.params().to_vec();
        if let Some(s) = &self.seasonal {
            ids.extend(s.decoder.params());
        }
        ids
    }

    /// Encodes a `B x T` batch and draws `z` with the given noise.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        which: Component,
        noise: Option<Var<'g>>,
    ) -> Result<Posterior<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.lookback {
            return Err(Error::Length {
                what: "encoder input",
                expected: self.config.lookback,
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let (mu, logvar) = self.stack(which)?.encoder.forward(g, store, x)?;
        let z = match noise {
            Some(eps) => reparameterize(mu, logvar, eps)?,
            None => mu,
        };
        Ok(Posterior { mu, logvar, z })
    }

    /// Encodes one window; `noise` of all zeros gives `z = mu`.
    pub fn encode_one(
        &self,
        store: &ParamStore,
        x: &[f64],
        which: Component,
        noise: &[f64],
    ) -> Result<LatentSample> {
        if noise.len() != self.config.d_z {
            return Err(Error::Length {
                what: "noise",
                expected: self.config.d_z,
                actual: noise.len(),
            });
        }
        let g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let eps = g.constant(Tensor::matrix(1, noise.len(), noise.to_vec())?);
        let p = self.encode(&g, store, xv, which, Some(eps))?;
        Ok(LatentSample {
            mu: p.mu.to_vec(),
            logvar: p.logvar.to_vec(),
            z: p.z.to_vec(),
        })
    }

    /// Reconstructs a component from `z` (`B x d_z`) and the domain one-hot
    /// (`B x M`). Unconditional models take `None`.
    pub fn decode<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        z: Var<'g>,
        one_hot: Option<Var<'g>>,
        which: Component,
    ) -> Result<Var<'g>> {
        let dec = &self.stack(which)?.decoder;
        let input = match (self.config.conditional, one_hot) {
            (true, Some(oh)) => {
                let width = oh.shape().last().copied().unwrap_or(0);
                if width != self.config.num_domains {
                    return Err(Error::Length {
                        what: "domain one-hot",
                        expected: self.config.num_domains,
                        actual: width,
                    });
                }
                g.concat(&[z, oh])?
            }
            (true, None) => {
                return Err(Error::config("decode", "conditional decoder needs a domain one-hot"))
            }
            (false, _) => z,
        };
        dec.forward(g, store, input)
    }

    /// Batch-mean latent objective: the combined reconstruction error plus
    /// β times the component NLLs and KL terms.
    pub fn latent_loss<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        batch: &LatentBatch,
        noise: &LatentNoise,
    ) -> Result<LatentTerms<'g>> {
        let b = batch.x.shape()[0];
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&bad) = batch.domains.iter().find(|&&d| d >= self.config.num_domains.max(1)) {
            if self.config.conditional {
                return Err(Error::UnknownDomain {
                    domain_id: bad,
                    num_domains: self.config.num_domains,
                });
            }
        }
        let inv_b = 1.0 / b as f64;
        let x = g.constant(batch.x.clone());
        let oh = g.constant(batch.one_hot.clone());
        let recon = |target: Var<'g>, post: &Posterior<'g>, which| -> Result<(Var<'g>, Var<'g>)> {
            let xh = self.decode(g, store, post.z, Some(oh), which)?;
            let nll = xh.sub(target)?.square().sum().scale(0.5);
            Ok((xh, nll.add(kl_to_standard_normal(post.mu, post.logvar)?)?))
        };
        let (combined, bracket, trend, seasonal) = if self.seasonal.is_some() {
            let xt = g.constant(batch.x_trend.clone());
            let xs = g.constant(batch.x_seasonal.clone());
            let eps_t = g.constant(noise.trend.clone());
            let eps_s = g.constant(noise.seasonal.clone());
            let pt = self.encode(g, store, xt, Component::Trend, Some(eps_t))?;
            let ps = self.encode(g, store, xs, Component::Seasonal, Some(eps_s))?;
            let (xh_t, br_t) = recon(xt, &pt, Component::Trend)?;
            let (xh_s, br_s) = recon(xs, &ps, Component::Seasonal)?;
            let combined = xh_t.add(xh_s)?.sub(x)?.square().sum();
            (combined, br_t.add(br_s)?, pt, Some(ps))
        } else {
            let eps = g.constant(noise.trend.clone());
            let p = self.encode(g, store, x, Component::Trend, Some(eps))?;
            let (xh, br) = recon(x, &p, Component::Trend)?;
            (xh.sub(x)?.square().sum(), br, p, None)
        };
        let combined = combined.scale(inv_b);
        let bracket = bracket.scale(inv_b);
        let total = combined.add(bracket.scale(self.config.beta))?;
        Ok(LatentTerms {
            combined,
            bracket,
            total,
            trend,
            seasonal,
        })
    }
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize<'g>(mu: Var<'g>, logvar: Var<'g>, noise: Var<'g>) -> Result<Var<'g>> {
    Ok(mu.add(logvar.scale(0.5).exp().mul(noise)?)?)
}

/// `0.5 Σ (mu² + exp(logvar) − 1 − logvar)`, summed over every entry.
pub fn kl_to_standard_normal<'g>(mu: Var<'g>, logvar: Var<'g>) -> Result<Var<'g>> {
    Ok(mu
        .square()
        .add(logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0)
        .sum()
        .scale(0.5))
}

/// `floor(alpha * d_z)`, rejecting splits that leave either part empty.
pub fn split_index(alpha: f64, d_z: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    let index = (alpha * d_z as f64).floor() as usize;
    if index == 0 || index >= d_z {
        return Err(Error::DegenerateSplit { alpha, d_z, index });
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLatents {
    /// `concat(z_t[..index], z_s[..index])`.
    pub z_shared: Vec<f64>,
    /// `concat(z_t[index..], z_s[index..])`.
    pub z_specific: Vec<f64>,
    pub index: usize,
}

pub fn split_latents(z_t: &[f64], z_s: &[f64], alpha: f64) -> Result<SplitLatents> {
    if z_t.len() != z_s.len() {
        return Err(Error::Length {
            what: "seasonal latent",
            expected: z_t.len(),
            actual: z_s.len(),
        });
    }
    let index = split_index(alpha, z_t.len())?;
    Ok(SplitLatents {
        z_shared: [&z_t[..index], &z_s[..index]].concat(),
        z_specific: [&z_t[index..], &z_s[index..]].concat(),
        index,
    })
}

impl SplitLatents {
    /// Inverse of [`split_latents`].
    pub fn reassemble(&self) -> (Vec<f64>, Vec<f64>) {
        let i = self.index;
        let rest = self.z_specific.len() / 2;
        let z_t = [&self.z_shared[..i], &self.z_specific[..rest]].concat();
        let z_s = [&self.z_shared[i..], &self.z_specific[rest..]].concat();
        (z_t, z_s)
    }
}

/// Batched split. With a single stack the shared part is `z[..index]` and
/// the specific part `z[index..]`.
pub fn split_batch<'g>(
    z_t: Var<'g>,
    z_s: Option<Var<'g>>,
    index: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let d = z_t.shape().last().copied().unwrap_or(0);
    let g = z_t.graph();
    match z_s {
        Some(z_s) => Ok((
            g.concat(&[z_t.slice_last(0..index)?, z_s.slice_last(0..index)?])?,
            g.concat(&[z_t.slice_last(index..d)?, z_s.slice_last(index..d)?])?,
        )),
        None => Ok((z_t.slice_last(0..index)?, z_t.slice_last(index..d)?)),
    }
}

/// Pulls shared latents together over all ordered pairs and pushes
/// specific latents apart over cross-domain ordered pairs:
///
/// ```text
/// Ω = (1/N²) Σ_{i,j} ‖s_i − s_j‖ − (1/N_diff) Σ_{D(i)≠D(j)} ‖p_i − p_j‖
/// ```
///
/// The second term is zero when no cross-domain pair exists.
pub fn domain_regularizer<'g>(
    shared: Var<'g>,
    specific: Var<'g>,
    domains: &[usize],
) -> Result<Var<'g>> {
    let n = domains.len();
    if shared.shape().first() != Some(&n) || specific.shape().first() != Some(&n) {
        return Err(Error::Length {
            what: "regularizer batch",
            expected: n,
            actual: shared.shape().first().copied().unwrap_or(0),
        });
    }
    if n < 2 {
        return Err(Error::Data("the domain regularizer needs at least two samples".into()));
    }
    let (mut left, mut right) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
    for i in 0..n {
        for j in 0..n {
            left.push(i);
            right.push(j);
        }
    }
    let pull = shared
        .gather_rows(&left)?
        .sub(shared.gather_rows(&right)?)?
        .row_norm()
        .sum()
        .scale(1.0 / (n * n) as f64);

    let (cl, cr): (Vec<usize>, Vec<usize>) = left
        .iter()
        .zip(&right)
        .filter(|(&i, &j)| domains[i] != domains[j])
        .map(|(&i, &j)| (i, j))
        .unzip();
    if cl.is_empty() {
        return Ok(pull);
    }
    let push = specific
        .gather_rows(&cl)?
        .sub(specific.gather_rows(&cr)?)?
        .row_norm()
        .sum()
        .scale(1.0 / cl.len() as f64);
    Ok(pull.sub(push)?)
}
