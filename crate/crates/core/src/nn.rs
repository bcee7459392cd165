//! Layers built from graph primitives. Every layer owns only parameter ids;
//! values live in a shared [`ParamStore`].

use dgf_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Glorot (Xavier) uniform initialization for a `fan_in x fan_out` matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches length")
}

/// `y = x W + b` over a batch of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(x.matmul(w)?.add_bias(b)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Gated recurrent unit with reset, update and candidate gates:
///
/// ```text
/// r = σ(x W_r + h U_r + b_r)
/// u = σ(x W_u + h U_u + b_u)
/// n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 - u) ⊙ n + u ⊙ h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    /// Input map to the three stacked gates, `input x 3H`.
    pub input: Linear,
    /// Hidden map to the three stacked gates, `H x 3H`.
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        // Glorot limits are computed per gate block so they match three
        // separate `input x H` matrices.
        let stacked = |store: &mut ParamStore, rng: &mut R, suffix: &str, fan_in: usize| {
            let blocks: Vec<Tensor> = (0..3).map(|_| glorot(fan_in, hidden_size, rng)).collect();
            let mut data = Vec::with_capacity(fan_in * 3 * hidden_size);
            for row in 0..fan_in {
                for b in &blocks {
                    data.extend_from_slice(b.row(row));
                }
            }
            let w = store.add(
                format!("{name}.{suffix}.weight"),
                Tensor::new(vec![fan_in, 3 * hidden_size], data).expect("shape matches length"),
            );
            let b = store.add(format!("{name}.{suffix}.bias"), Tensor::zeros(&[3 * hidden_size]));
            Linear {
                weight: w,
                bias: b,
                fan_in,
                fan_out: 3 * hidden_size,
            }
        };
        let input = stacked(store, rng, "input", input_size);
        let hidden = stacked(store, rng, "hidden", hidden_size);
        Self {
            input,
            hidden,
            hidden_size,
        }
    }

    pub fn step<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        h: Var<'g>,
    ) -> Result<Var<'g>> {
        let hs = self.hidden_size;
        let gi = self.input.forward(g, store, x)?;
        let gh = self.hidden.forward(g, store, h)?;
        let r = gi.slice_last(0..hs)?.add(gh.slice_last(0..hs)?)?.sigmoid();
        let u = gi
            .slice_last(hs..2 * hs)?
            .add(gh.slice_last(hs..2 * hs)?)?
            .sigmoid();
        let n = gi
            .slice_last(2 * hs..3 * hs)?
            .add(r.mul(gh.slice_last(2 * hs..3 * hs)?)?)?
            .tanh();
        // (1 - u) n + u h  ==  n + u (h - n)
        Ok(n.add(u.mul(h.sub(n)?)?)?)
    }

    pub fn initial_state<'g>(&self, g: &'g Graph, batch: usize) -> Var<'g> {
        g.constant(Tensor::zeros(&[batch, self.hidden_size]))
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.input.weight,
            self.input.bias,
            self.hidden.weight,
            self.hidden.bias,
        ]
    }
}

/// Inverted dropout: zeroes each entry with probability `p` and rescales the
/// survivors by `1 / (1 - p)`. Identity when `p == 0`.
pub fn dropout<'g, R: Rng + ?Sized>(x: Var<'g>, p: f64, rng: &mut R) -> Result<Var<'g>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = x.graph().constant(Tensor::new(x.shape(), mask)?);
    Ok(x.mul(mask)?)
}

/// Row-major `rows x cols` tensor from batch rows.
pub fn batch_tensor<R: AsRef<[f64]>>(rows: &[R]) -> Result<Tensor> {
    Ok(Tensor::from_rows(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgf_grad::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot(10, 6, &mut rng);
        let lim = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= lim));
        assert_eq!(t.shape(), &[10, 6]);
    }

    #[test]
    fn linear_with_zero_weight_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        store.get_mut(lin.weight).data_mut().fill(0.0);
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[1.5, -2.0]);
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        let y = lin.forward(&g, &store, x).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn gru_with_zero_weights_interpolates_to_zero() {
        // All-zero parameters: u = 0.5, n = 0, so h' = h / 2.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        for p in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, -1.0]]).unwrap());
        let h = g.constant(Tensor::from_rows(&[[2.0, 4.0, -6.0]]).unwrap());
        let out = cell.step(&g, &store, x, h).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, -3.0]);
    }

    #[test]
    fn gru_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        let err = grad_check_params(
            &store,
            |g, s| {
                let x = g.constant(Tensor::from_rows(&[[0.3, -0.7], [1.1, 0.2]])?);
                let mut h = cell.initial_state(g, 2);
                for _ in 0..3 {
                    h = cell.step(g, s, x, h)?;
                }
                Ok(h.square().sum())
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_rescales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1000], 1.0));
        let y = dropout(x, 0.3, &mut rng).unwrap().to_vec();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        let kept = y.iter().filter(|&&v| v > 0.0).count();
        assert!((600..800).contains(&kept), "{kept}");
        let same = dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same.to_vec(), vec![1.0; 1000]);
    }
}
