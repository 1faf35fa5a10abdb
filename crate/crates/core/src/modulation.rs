//! Conditioning algebra of the high-resolution branch: guidance fusion,
//! time modulation of the fused feature, and scale-aware normalization.
//!
//! Time modulation and scale-aware normalization are the same operation,
//! `Norm(f) ⊙ L1(e) + L2(e) + f`, driven by different embeddings; both are
//! [`Modulation`]. `Norm` is channel layer normalization without affine.
//! Every linear map here starts at zero, which makes each operation an exact
//! identity until trained.

use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::params::{Binder, Group, Init, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::Float;

pub const NORM_EPS: f64 = 1e-5;

/// `f′ = Norm(f) ⊙ L1(e) + L2(e) + f`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub scale: Linear,
    pub shift: Linear,
}

impl Modulation {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, embed_dim: usize, channels: usize) -> Self {
        Modulation {
            scale: Linear::new(store, rng, &format!("{name}.scale"), Group::Adapter, embed_dim, channels, Init::Zero),
            shift: Linear::new(store, rng, &format!("{name}.shift"), Group::Adapter, embed_dim, channels, Init::Zero),
        }
    }

    /// `f` is `[b, n, c]`, `e` is `[b, embed_dim]`.
    pub fn forward<'g, T: Float>(&self, b: &Binder<'g, '_, T>, f: Var<'g, T>, e: Var<'g, T>) -> Var<'g, T> {
        let s = self.scale.forward(b, e);
        let sh = self.shift.forward(b, e);
        f.layer_norm(NORM_EPS).mul_mid(s).add_mid(sh).add(f)
    }

    pub fn param_count(&self) -> usize {
        2 * (self.scale.fan_in + 1) * self.scale.fan_out
    }
}

/// `f′ = Linear(Concat(f, g′)) + f`.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub proj: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, channels: usize, guide_channels: usize) -> Self {
        Fusion {
            proj: Linear::new(store, rng, &format!("{name}.proj"), Group::Adapter, channels + guide_channels, channels, Init::Zero),
        }
    }

    /// `f` is `[b, n, c]`, `g` is `[b, n, c_g]`.
    pub fn forward<'g, T: Float>(&self, b: &Binder<'g, '_, T>, f: Var<'g, T>, g: Var<'g, T>) -> Result<Var<'g, T>> {
        let (fs, gs) = (f.shape(), g.shape());
        ensure!(
            fs.len() == 3 && gs.len() == 3 && fs[..2] == gs[..2],
            Input,
            "guidance shape {gs:?} does not match feature shape {fs:?}"
        );
        Ok(self.proj.forward(b, f.concat_last(g)).add(f))
    }

    pub fn param_count(&self) -> usize {
        (self.proj.fan_in + 1) * self.proj.fan_out
    }
}

/// `log_{n_high} n_low`, computed from latent pixel counts.
pub fn scale_value(n_high: usize, n_low: usize) -> Result<f64> {
    ensure!(n_low >= 2, Domain, "base pixel count must be at least 2, got {n_low}");
    ensure!(n_high >= n_low, Domain, "target pixel count {n_high} is below base pixel count {n_low}");
    if n_high == n_low {
        return Ok(1.0);
    }
    Ok((n_low as f64).ln() / (n_high as f64).ln())
}
