//! Sinusoidal embedding of a scalar in `[0, 1]`.
//!
//! Used for both the diffusion time and the resolution scale value, so the
//! two share one frequency ladder: `ω_i = P^(−i/(half−1))` for
//! `i ∈ 0..half`, with `P = 10000`, applied to `t·P`. The output is
//! `[sin(t·P·ω_0), …, sin(t·P·ω_{half−1}), cos(t·P·ω_0), …]`.

use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

pub const MAX_PERIOD: f64 = 10_000.0;

pub fn sinusoidal(x: f64, dim: usize) -> Result<Vec<f64>> {
    ensure!(dim >= 2 && dim.is_multiple_of(2), Config, "embedding dimension must be even and positive, got {dim}");
    ensure!(x.is_finite(), Domain, "embedding input {x} is not finite");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            MAX_PERIOD.powf(-(i as f64) / (half - 1) as f64)
        };
        let arg = x * MAX_PERIOD * omega;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1]");
    sinusoidal(t, dim)
}

pub fn scale_embed(s: f64, dim: usize) -> Result<Vec<f64>> {
    ensure!(s > 0.0 && s <= 1.0, Domain, "scale value {s} outside (0, 1]");
    sinusoidal(s, dim)
}

/// Stack embeddings of several inputs into a `[n, dim]` tensor.
pub fn batch<T: Float>(values: &[f64], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        data.extend(sinusoidal(v, dim)?.into_iter().map(T::lit));
    }
    Ok(Tensor::new(&[values.len(), dim], data))
}
