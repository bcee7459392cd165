//! Latent fusion, input augmentation and the probabilistic decoders.

use dgf_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::data::NormStats;
use crate::decomposition::moving_average_matrix;
use crate::error::{Error, Result};
use crate::nn::{dropout, glorot, GruCell, Linear};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Quantile levels reported for every forecast.
pub const QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const MEDIAN_ROW: usize = 4;

/// `z = z_t + z_s`.
pub fn fuse_latents<'g>(z_t: Var<'g>, z_s: Var<'g>) -> Result<Var<'g>> {
    if z_t.shape() != z_s.shape() {
        return Err(Error::Length {
            what: "fused latent",
            expected: z_t.numel(),
            actual: z_s.numel(),
        });
    }
    Ok(z_t.add(z_s)?)
}

/// `x' = concat(z, x) W + b` with `W` of shape `(d_z + T) x T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_z: usize,
    pub lookback: usize,
}

impl Augment {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_z: usize, lookback: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add("augment.weight", glorot(d_z + lookback, lookback, rng)),
            bias: store.add("augment.bias", Tensor::zeros(&[lookback])),
            d_z,
            lookback,
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        z: Var<'g>,
        x: Var<'g>,
    ) -> Result<Var<'g>> {
        augment_input(z, x, g.param(store, self.weight), g.param(store, self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Batched `concat(z, x) W + b`; `z` is `B x d_z`, `x` is `B x T`.
pub fn augment_input<'g>(z: Var<'g>, x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let (zs, xs, ws) = (z.shape(), x.shape(), w.shape());
    if zs.len() != 2 || xs.len() != 2 || zs[0] != xs[0] || ws != [zs[1] + xs[1], xs[1]] {
        return Err(Error::Grad(dgf_grad::GradError::ShapeMismatch {
            op: "augment_input",
            lhs: [zs, xs].concat(),
            rhs: ws,
        }));
    }
    Ok(z.graph().concat(&[z, x])?.matmul(w)?.add_bias(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Autoregressive GRU with a Gaussian head.
    Recurrent,
    /// Trend/seasonal linear maps with a softplus scale head.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub hidden: usize,
    pub dropout: f64,
    /// Paths drawn per window by the recurrent decoder at inference.
    pub sample_paths: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.sample_paths == 0 {
            return Err(Error::config("sample_paths", "must be at least 1"));
        }
        Ok(())
    }
}

/// Decomposes `x'` with a moving average, maps trend and remainder to the
/// horizon with separate linear layers, and predicts the scale from `x'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    pub trend: Linear,
    pub seasonal: Linear,
    pub sigma: Linear,
    pub kernel: usize,
    pub lookback: usize,
}

impl LinearDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        lookback: usize,
        horizon: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        moving_average_matrix(lookback, kernel)?;
        Ok(Self {
            trend: Linear::new(store, "linear.trend", lookback, horizon, rng),
            seasonal: Linear::new(store, "linear.seasonal", lookback, horizon, rng),
            sigma: Linear::new(store, "linear.sigma", lookback, horizon, rng),
            kernel,
            lookback,
        })
    }

    /// Returns `(mu, sigma)`, each `B x h`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x_prime: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let t = self.lookback;
        let m = moving_average_matrix(t, self.kernel)?;
        let m = g.constant(Tensor::matrix(t, t, m)?).transpose()?;
        let trend = x_prime.matmul(m)?;
        let seasonal = x_prime.sub(trend)?;
        let mu = self
            .trend
            .forward(g, store, trend)?
            .add(self.seasonal.forward(g, store, seasonal)?)?;
        let sigma = self
            .sigma
            .forward(g, store, x_prime)?
            .softplus()
            .add_scalar(SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.trend.params(), self.seasonal.params(), self.sigma.params()].concat()
    }
}

/// Autoregressive GRU decoder. Each step consumes `[value, features]`:
/// first the augmented lookback, then the previous target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentDecoder {
    pub cell: GruCell,
    pub mu: Linear,
    pub sigma: Linear,
    pub feature_dim: usize,
    pub horizon: usize,
}

/// Inputs shared by both decoders for one batch.
#[derive(Debug, Clone, Copy)]
pub struct DecodeInput<'g> {
    /// `B x T` augmented window.
    pub x_prime: Var<'g>,
    /// `B x (T * feature_dim)` external features; ignored when the
    /// dimension is zero.
    pub features: Option<Var<'g>>,
    /// `B x 1` last observed value, the first autoregressive input.
    pub last: Var<'g>,
}

impl RecurrentDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        feature_dim: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cell: GruCell::new(store, "rnn.cell", 1 + feature_dim, hidden, rng),
            mu: Linear::new(store, "rnn.mu", hidden, 1, rng),
            sigma: Linear::new(store, "rnn.sigma", hidden, 1, rng),
            feature_dim,
            horizon,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.cell.params()[..], &self.mu.params(), &self.sigma.params()].concat()
    }

    fn step_input<'g>(
        &self,
        g: &'g Graph,
        value: Var<'g>,
        features: Option<Var<'g>>,
        t: usize,
    ) -> Result<Var<'g>> {
        match (self.feature_dim, features) {
            (0, _) | (_, None) => Ok(value),
            (fd, Some(a)) => Ok(g.concat(&[value, a.slice_last(t * fd..(t + 1) * fd)?])?),
        }
    }

    fn condition<'g>(&self, g: &'g Graph, store: &ParamStore, input: &DecodeInput<'g>) -> Result<Var<'g>> {
        let shape = input.x_prime.shape();
        let (batch, t) = (shape[0], shape[1]);
        let mut h = self.cell.initial_state(g, batch);
        for i in 0..t {
            let v = input.x_prime.slice_last(i..i + 1)?;
            h = self.cell.step(g, store, self.step_input(g, v, input.features, i)?, h)?;
        }
        Ok(h)
    }

    fn heads<'g>(&self, g: &'g Graph, store: &ParamStore, h: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let mu = self.mu.forward(g, store, h)?;
        let sigma = self.sigma.forward(g, store, h)?.softplus().add_scalar(SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// Teacher-forced pass returning `(mu, sigma)`, each `B x h`. `y` is the
    /// `B x h` target; dropout is applied to the hidden state before the
    /// heads when `p > 0`.
    pub fn forward_train<'g, R: Rng + ?Sized>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        input: &DecodeInput<'g>,
        y: Var<'g>,
        p: f64,
        rng: &mut R,
    ) -> Result<(Var<'g>, Var<'g>)> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        let t = input.x_prime.shape()[1];
        let mut h = self.condition(g, store, input)?;
        let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
        for k in 0..self.horizon {
            let prev = if k == 0 { input.last } else { y.slice_last(k - 1..k)? };
            h = self.cell.step(g, store, self.step_input(g, prev, input.features, t - 1)?, h)?;
            let (m, s) = self.heads(g, store, dropout(h, p, rng)?)?;
            mus.push(m);
            sigmas.push(s);
        }
        Ok((g.concat(&mus)?, g.concat(&sigmas)?))
    }

    /// Ancestral sampling: `paths` trajectories per window, each step fed
    /// the value drawn at the previous step. Returns `B` blocks of
    /// `paths x h` values.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x_prime: &Tensor,
        features: Option<&Tensor>,
        last: &[f64],
        paths: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        let (batch, t) = (x_prime.shape()[0], x_prime.shape()[1]);
        let hs = self.cell.hidden_size;
        let fd = self.feature_dim;
        let h0 = {
            let g = Graph::new();
            let input = DecodeInput {
                x_prime: g.constant(x_prime.clone()),
                features: features.map(|a| g.constant(a.clone())),
                last: g.constant(Tensor::matrix(batch, 1, last.to_vec())?),
            };
            self.condition(&g, store, &input)?.to_vec()
        };
        let rows = batch * paths;
        let mut h: Vec<f64> = Vec::with_capacity(rows * hs);
        let mut prev = Vec::with_capacity(rows);
        let mut feat = Vec::with_capacity(rows * fd);
        for b in 0..batch {
            for _ in 0..paths {
                h.extend_from_slice(&h0[b * hs..(b + 1) * hs]);
                prev.push(last[b]);
                if let (true, Some(a)) = (fd > 0, features) {
                    feat.extend_from_slice(&a.row(b)[(t - 1) * fd..t * fd]);
                }
            }
        }
        let mut out = vec![vec![vec![0.0; self.horizon]; paths]; batch];
        for k in 0..self.horizon {
            let g = Graph::new();
            let hv = g.constant(Tensor::matrix(rows, hs, h)?);
            let pv = g.constant(Tensor::matrix(rows, 1, prev.clone())?);
            let x = if fd > 0 && features.is_some() {
                g.concat(&[pv, g.constant(Tensor::matrix(rows, fd, feat.clone())?)])?
            } else {
                pv
            };
            let hn = self.cell.step(&g, store, x, hv)?;
            let (mu, sigma) = self.heads(&g, store, hn)?;
            let (mu, sigma) = (mu.to_vec(), sigma.to_vec());
            for r in 0..rows {
                let draw = Normal::new(mu[r], sigma[r])
                    .map_err(|e| Error::Training(format!("sampling: {e}")))?
                    .sample(rng);
                prev[r] = draw;
                out[r / paths][r % paths][k] = draw;
            }
            h = hn.to_vec();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Linear(LinearDecoder),
    Recurrent(RecurrentDecoder),
}

impl Decoder {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Decoder::Linear(d) => d.params(),
            Decoder::Recurrent(d) => d.params(),
        }
    }
}

/// Mean over entries of `0.5 ln(2π σ²) + (y − μ)² / (2σ²)`.
pub fn gaussian_nll<'g>(y: Var<'g>, mu: Var<'g>, sigma: Var<'g>) -> Result<Var<'g>> {
    if y.shape() != mu.shape() || mu.shape() != sigma.shape() {
        return Err(Error::Length {
            what: "gaussian_nll operands",
            expected: y.numel(),
            actual: if y.shape() != mu.shape() { mu.numel() } else { sigma.numel() },
        });
    }
    if sigma.to_vec().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Grad(dgf_grad::GradError::Domain {
            op: "gaussian_nll",
            detail: "sigma must be positive".into(),
        }));
    }
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let z = y.sub(mu)?.div(sigma)?;
    Ok(sigma
        .log()?
        .add(z.square().scale(0.5))?
        .add_scalar(half_ln_2pi)
        .mean())
}

/// Raw decoder output for one window, in normalized model space.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderOutput {
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
    /// `S x h` sample paths.
    Samples(Vec<Vec<f64>>),
}

/// Predictive quantiles in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    /// The median row.
    pub point: Vec<f64>,
    /// One row per entry of [`QUANTILES`].
    pub quantiles: Vec<Vec<f64>>,
    /// Sample paths in model space, when the decoder sampled.
    #[serde(skip)]
    pub samples: Option<Vec<Vec<f64>>>,
    pub scale: f64,
    pub norm_stats: NormStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Linear-interpolated empirical quantile of sorted data.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Converts decoder output to quantiles, then undoes instance normalization
/// and scaling (in that order).
pub fn to_distribution(output: DecoderOutput, scale: f64, stats: NormStats) -> Result<ForecastDistribution> {
    let restore = |v: f64| stats.denormalize(v) * scale;
    let (quantiles, samples, warning) = match output {
        DecoderOutput::Gaussian { mu, sigma } => {
            if mu.len() != sigma.len() {
                return Err(Error::Length {
                    what: "sigma",
                    expected: mu.len(),
                    actual: sigma.len(),
                });
            }
            let std = StdNormal::standard();
            let rows = QUANTILES
                .iter()
                .map(|&q| {
                    let zq = std.inverse_cdf(q);
                    mu.iter().zip(&sigma).map(|(m, s)| restore(m + s * zq)).collect()
                })
                .collect();
            (rows, None, None)
        }
        DecoderOutput::Samples(paths) => {
            let s = paths.len();
            if s == 0 {
                return Err(Error::Data("no sample paths".into()));
            }
            let h = paths[0].len();
            if let Some(bad) = paths.iter().find(|p| p.len() != h) {
                return Err(Error::Length {
                    what: "sample path",
                    expected: h,
                    actual: bad.len(),
                });
            }
            let mut rows = vec![vec![0.0; h]; QUANTILES.len()];
            for k in 0..h {
                let mut col: Vec<f64> = paths.iter().map(|p| p[k]).collect();
                col.sort_by(f64::total_cmp);
                for (row, &q) in rows.iter_mut().zip(&QUANTILES) {
                    row[k] = restore(empirical_quantile(&col, q));
                }
            }
            let warning = (s < 10).then(|| format!("only {s} sample paths; quantiles are coarse"));
            (rows, Some(paths), warning)
        }
    };
    Ok(ForecastDistribution {
        point: quantiles[MEDIAN_ROW].clone(),
        quantiles,
        samples,
        scale,
        norm_stats: stats,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgf_grad::{grad_check, grad_check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2PI_HALF: f64 = 0.918_938_533_204_672_7;

    #[test]
    fn fuse_examples() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(fuse_latents(a, b).unwrap().to_vec(), vec![4.0, 6.0]);
        assert_eq!(fuse_latents(b, a).unwrap().to_vec(), fuse_latents(a, b).unwrap().to_vec());
        let z = g.constant(Tensor::zeros(&[2]));
        assert_eq!(fuse_latents(z, z).unwrap().to_vec(), vec![0.0, 0.0]);
        let c = g.constant(Tensor::vector(vec![1.0]));
        assert!(fuse_latents(a, c).is_err());
    }

    #[test]
    fn augment_examples() {
        let g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let x = g.constant(Tensor::from_rows(&[[2.0, 3.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        assert_eq!(augment_input(z, x, w, b).unwrap().to_vec(), vec![4.0, 5.0]);

        let w0 = g.constant(Tensor::zeros(&[3, 2]));
        let ones = g.constant(Tensor::full(&[2], 1.0));
        assert_eq!(augment_input(z, x, w0, ones).unwrap().to_vec(), vec![1.0, 1.0]);
        let wbad = g.constant(Tensor::zeros(&[2, 2]));
        assert!(augment_input(z, x, wbad, b).is_err());
    }

    #[test]
    fn augment_gradient_wrt_z() {
        let err = grad_check(
            |g, z| {
                let x = g.constant(Tensor::from_rows(&[[0.2, -0.4, 1.0]])?);
                let w = g.constant(Tensor::from_rows(&[
                    [0.3, -0.1, 0.5],
                    [0.7, 0.2, -0.6],
                    [0.1, 0.9, 0.4],
                    [-0.5, 0.3, 0.2],
                    [0.8, -0.7, 0.1],
                ])?);
                let b = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
                Ok(augment_input(z, x, w, b)?.tanh().sum())
            },
            &Tensor::from_rows(&[[0.5, -1.5]]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nll_values() {
        let g = Graph::new();
        let v = |x: f64| g.constant(Tensor::vector(vec![x]));
        let nll = gaussian_nll(v(2.0), v(2.0), v(1.0)).unwrap().item();
        assert!((nll - LN_2PI_HALF).abs() < 1e-12);
        let nll = gaussian_nll(v(3.0), v(2.0), v(1.0)).unwrap().item();
        assert!((nll - (LN_2PI_HALF + 0.5)).abs() < 1e-12);
        assert!(gaussian_nll(v(3.0), v(2.0), v(0.0)).is_err());
        assert!(gaussian_nll(v(3.0), v(2.0), v(-1.0)).is_err());
    }

    #[test]
    fn nll_minimized_at_absolute_residual() {
        let f = |s: f64| {
            let g = Graph::new();
            let v = |x: f64| g.constant(Tensor::vector(vec![x]));
            gaussian_nll(v(1.3), v(0.5), v(s)).unwrap().item()
        };
        let r = 0.8;
        assert!(f(r) < f(r * 0.9) && f(r) < f(r * 1.1));
        assert!(f(1e-4) > f(r) + 10.0 && f(1e4) > f(r) + 5.0);
        let g = Graph::new();
        let sigma = g.variable(Tensor::vector(vec![r]));
        let v = |x: f64| g.constant(Tensor::vector(vec![x]));
        let grads = g.backward(gaussian_nll(v(1.3), v(0.5), sigma).unwrap()).unwrap();
        assert!(grads.wrt(sigma).unwrap()[0].abs() < 1e-12);
    }

    fn linear_decoder(rng: &mut ChaCha8Rng) -> (ParamStore, LinearDecoder) {
        let mut store = ParamStore::new();
        let d = LinearDecoder::new(&mut store, 7, 3, 3, rng).unwrap();
        (store, d)
    }

    #[test]
    fn linear_decoder_degenerate_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut store, d) = linear_decoder(&mut rng);
        for l in [d.trend, d.seasonal, d.sigma] {
            store.get_mut(l.weight).data_mut().fill(0.0);
        }
        store.get_mut(d.trend.bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        store.get_mut(d.seasonal.bias).data_mut().copy_from_slice(&[0.5, 0.5, 0.5]);
        store.get_mut(d.sigma.bias).data_mut().copy_from_slice(&[0.0, 1.0, -1.0]);
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]]).unwrap());
        let (mu, sigma) = d.forward(&g, &store, x).unwrap();
        assert_eq!(mu.to_vec(), vec![1.5, 2.5, 3.5]);
        let sp = |v: f64| (1.0 + f64::exp(v)).ln() + SIGMA_FLOOR;
        for (s, b) in sigma.to_vec().iter().zip([0.0, 1.0, -1.0]) {
            assert!((s - sp(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_decoder_mu_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, d) = linear_decoder(&mut rng);
        let x1: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.9);
        let mu = |x: Vec<f64>| {
            let g = Graph::new();
            let xv = g.constant(Tensor::matrix(1, 7, x).unwrap());
            d.forward(&g, &store, xv).unwrap().0.to_vec()
        };
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let (m1, m2, mc) = (mu(x1), mu(x2), mu(combo));
        for k in 0..3 {
            assert!((mc[k] - (a * m1[k] + b * m2[k])).abs() < 1e-12);
        }
    }

    fn recurrent(rng: &mut ChaCha8Rng, fd: usize) -> (ParamStore, RecurrentDecoder) {
        let mut store = ParamStore::new();
        let d = RecurrentDecoder::new(&mut store, 4, fd, 3, rng);
        (store, d)
    }

    #[test]
    fn recurrent_degenerate_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut store, d) = recurrent(&mut rng, 0);
        for p in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        store.get_mut(d.mu.bias).data_mut()[0] = 0.75;
        store.get_mut(d.sigma.bias).data_mut()[0] = -0.5;
        let g = Graph::new();
        let input = DecodeInput {
            x_prime: g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()),
            features: None,
            last: g.constant(Tensor::from_rows(&[[2.0], [4.0]]).unwrap()),
        };
        let y = g.constant(Tensor::from_rows(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]).unwrap());
        let (mu, sigma) = d.forward_train(&g, &store, &input, y, 0.0, &mut rng).unwrap();
        assert_eq!(mu.shape(), vec![2, 3]);
        assert!(mu.to_vec().iter().all(|&m| m == 0.75));
        let want = (1.0 + f64::exp(-0.5)).ln() + SIGMA_FLOOR;
        assert!(sigma.to_vec().iter().all(|&s| (s - want).abs() < 1e-15));

        let paths = d
            .sample(&store, &Tensor::from_rows(&[[1.0, 2.0]]).unwrap(), None, &[2.0], 5, &mut rng)
            .unwrap();
        assert_eq!((paths.len(), paths[0].len(), paths[0][0].len()), (1, 5, 3));
    }

    #[test]
    fn recurrent_sample_mean_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, d) = recurrent(&mut rng, 0);
        let x = Tensor::from_rows(&[[0.3, -0.2, 0.5, 0.1]]).unwrap();
        let (mu1, s1) = {
            let g = Graph::new();
            let input = DecodeInput {
                x_prime: g.constant(x.clone()),
                features: None,
                last: g.constant(Tensor::from_rows(&[[0.1]]).unwrap()),
            };
            let y = g.constant(Tensor::zeros(&[1, 3]));
            let (m, s) = d.forward_train(&g, &store, &input, y, 0.0, &mut rng).unwrap();
            (m.to_vec()[0], s.to_vec()[0])
        };
        let n = 20_000;
        let paths = d.sample(&store, &x, None, &[0.1], n, &mut rng).unwrap();
        let mean = paths[0].iter().map(|p| p[0]).sum::<f64>() / n as f64;
        assert!((mean - mu1).abs() < 3.0 * s1 / (n as f64).sqrt(), "{mean} vs {mu1}");
    }

    #[test]
    fn decoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, d) = recurrent(&mut rng, 2);
        let x = Tensor::from_rows(&[[0.3, -0.2, 0.5], [1.0, 0.1, -0.4]]).unwrap();
        let a = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.6, 0.5, 0.4, 0.3, 0.2, 0.1]]).unwrap();
        let y = Tensor::from_rows(&[[0.2, 0.1, -0.3], [0.4, 0.0, 0.9]]).unwrap();
        let err = grad_check_params(
            &store,
            |g, s| {
                let input = DecodeInput {
                    x_prime: g.constant(x.clone()),
                    features: Some(g.constant(a.clone())),
                    last: g.constant(Tensor::from_rows(&[[0.5], [-0.4]])?),
                };
                let yv = g.constant(y.clone());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (m, sg) = d.forward_train(g, s, &input, yv, 0.0, &mut r)?;
                Ok(gaussian_nll(yv, m, sg)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "recurrent: {err}");

        let (store, d) = linear_decoder(&mut rng);
        let x = Tensor::from_rows(&[[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.3]]).unwrap();
        let err = grad_check_params(
            &store,
            |g, s| {
                let (m, sg) = d.forward(g, s, g.constant(x.clone()))?;
                Ok(gaussian_nll(g.constant(Tensor::from_rows(&[[0.1, 0.4, -0.2]])?), m, sg)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "linear: {err}");
    }

    #[test]
    fn closed_form_quantiles() {
        let d = to_distribution(
            DecoderOutput::Gaussian {
                mu: vec![0.0, 1.0],
                sigma: vec![1.0, 1e-12],
            },
            1.0,
            NormStats::IDENTITY,
        )
        .unwrap();
        assert_eq!(d.point, d.quantiles[4]);
        assert!(d.quantiles[4][0].abs() < 1e-12);
        assert!((d.quantiles[8][0] - 1.281_551_565_5).abs() < 1e-6);
        for row in &d.quantiles {
            assert!((row[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_quantiles_are_monotone_and_restored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let paths: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let stats = NormStats { mean: 3.0, std: 2.0 };
        let d = to_distribution(DecoderOutput::Samples(paths.clone()), 1.5, stats).unwrap();
        assert!(d.warning.is_none());
        for k in 0..4 {
            for w in d.quantiles.windows(2) {
                assert!(w[0][k] <= w[1][k]);
            }
        }
        // Re-normalizing recovers the model-space empirical quantiles.
        let mut col: Vec<f64> = paths.iter().map(|p| p[2]).collect();
        col.sort_by(f64::total_cmp);
        let back = stats.normalize(d.quantiles[6][2] / 1.5);
        assert!((back - empirical_quantile(&col, 0.7)).abs() < 1e-9);

        let few = to_distribution(DecoderOutput::Samples(paths[..5].to_vec()), 1.0, stats).unwrap();
        assert!(few.warning.is_some());
    }
}
