//! Moving-average split of a window into trend-cyclical and seasonal parts.
//!
//! The window is padded at both ends by repeating its edge values
//! `(kernel - 1) / 2` times, the trend is the centred moving average of the
//! padded series, and the seasonal part is the remainder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KERNEL: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedWindow {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub kernel: usize,
}

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::EvenKernel(kernel));
    }
    if kernel > len {
        return Err(Error::KernelTooLarge { kernel, len });
    }
    Ok(())
}

pub fn decompose(x: &[f64], kernel: usize) -> Result<DecomposedWindow> {
    check_kernel(kernel, x.len())?;
    let half = (kernel - 1) / 2;
    let last = x.len() - 1;
    let padded = |j: usize| x[j.saturating_sub(half).min(last)];
    let trend: Vec<f64> = (0..x.len())
        .map(|i| (i..i + kernel).map(padded).sum::<f64>() / kernel as f64)
        .collect();
    let seasonal = x.iter().zip(&trend).map(|(v, t)| v - t).collect();
    Ok(DecomposedWindow {
        trend,
        seasonal,
        kernel,
    })
}

/// Row-major `len x len` matrix `M` with `trend = M x`, for use inside a graph.
pub fn moving_average_matrix(len: usize, kernel: usize) -> Result<Vec<f64>> {
    check_kernel(kernel, len)?;
    let half = (kernel - 1) / 2;
    let w = 1.0 / kernel as f64;
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i..i + kernel {
            let src = j.saturating_sub(half).min(len - 1);
            m[i * len + src] += w;
        }
    }
    Ok(m)
}
