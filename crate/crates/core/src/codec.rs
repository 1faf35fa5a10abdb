//! Deterministic convolutional autoencoder between RGB images and latents,
//! and reconstruction PSNR.
//!
//! Encoder: space-to-depth by the spatial factor, then convolutions down to
//! `latent_channels`. Decoder mirrors it and ends in depth-to-space. Latents
//! are multiplied by a calibrated `latent_scale` so the diffusion model sees
//! roughly unit variance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::error::{ensure, Result};
use crate::params::{Binder, Conv, Group, Init, ParamId, ParamStore, Trainable};
use crate::rng::stream;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Weight of the finite-difference edge term in the training loss.
    pub edge_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            spatial_factor: 4,
            latent_channels: 4,
            hidden: 48,
            edge_weight: 0.1,
        }
    }
}

impl CodecConfig {
    pub fn compression_ratio(&self) -> f64 {
        (3 * self.spatial_factor * self.spatial_factor) as f64 / self.latent_channels as f64
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.spatial_factor.is_power_of_two() && self.spatial_factor >= 1,
            Config,
            "codec spatial_factor must be a power of two, got {}",
            self.spatial_factor
        );
        ensure!(self.latent_channels >= 1 && self.hidden >= 1, Config, "codec widths must be positive");
        ensure!(self.compression_ratio() > 1.0, Config, "codec must compress, ratio is {}", self.compression_ratio());
        ensure!(self.edge_weight >= 0.0, Config, "codec edge_weight must be non-negative");
        Ok(())
    }
}

pub const CHECKPOINT_KIND: &str = "codec";

#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore<f32>,
    enc: [Conv; 3],
    dec: [Conv; 3],
    scale: ParamId,
}

impl Codec {
    pub fn new(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init.codec");
        let (f, c, h) = (config.spatial_factor, config.latent_channels, config.hidden);
        let px = 3 * f * f;
        let g = Group::Base;
        let mut conv = |name: &str, k, i, o, gain| Conv::new(&mut store, &mut rng, name, g, k, i, o, Init::Scaled(gain));
        let enc = [
            conv("codec.enc.0", 3, px, h, 1.0),
            conv("codec.enc.1", 3, h, h, 1.0),
            conv("codec.enc.2", 1, h, c, 1.0),
        ];
        let dec = [
            conv("codec.dec.0", 3, c, h, 1.0),
            conv("codec.dec.1", 3, h, h, 1.0),
            conv("codec.dec.2", 3, h, px, 0.5),
        ];
        let scale = store.add("codec.latent_scale", g, Tensor::scalar(1.0));
        Ok(Codec {
            config: config.clone(),
            params: store,
            enc,
            dec,
            scale,
        })
    }

    /// Reassemble a codec around loaded parameters.
    pub fn from_params(config: &CodecConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut codec = Codec::new(config, 0)?;
        codec.params.load_values(&params)?;
        ensure!(params.len() == codec.params.len(), Config, "codec parameter set is incomplete");
        Ok(codec)
    }

    pub fn latent_scale(&self) -> f32 {
        self.params.get(self.scale).value.item()
    }

    pub fn set_latent_scale(&mut self, s: f32) {
        self.params.get_mut(self.scale).value = Tensor::scalar(s);
    }

    fn check_image(&self, s: &[usize]) -> Result<()> {
        let f = self.config.spatial_factor;
        ensure!(s.len() == 4 && s[3] == 3, Input, "image batch must be [b, h, w, 3], got {s:?}");
        ensure!(
            s[1].is_multiple_of(f) && s[2].is_multiple_of(f) && s[1] > 0 && s[2] > 0,
            Input,
            "image size {}x{} is not divisible by the codec factor {f}",
            s[1],
            s[2]
        );
        Ok(())
    }

    /// Unscaled encoder on a graph; `[b, h, w, 3] → [b, h/f, w/f, c]`.
    pub fn encode_var<'g, T: Float>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_image(&x.shape())?;
        let h = x.pixel_unshuffle(self.config.spatial_factor);
        let h = self.enc[0].forward(b, h).silu();
        let h = self.enc[1].forward(b, h).silu();
        Ok(self.enc[2].forward(b, h))
    }

    /// Unscaled decoder on a graph, without the final clamp.
    pub fn decode_var<'g, T: Float>(&self, b: &Binder<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = z.shape();
        ensure!(
            s.len() == 4 && s[3] == self.config.latent_channels,
            Input,
            "latent batch must be [b, h, w, {}], got {s:?}",
            self.config.latent_channels
        );
        let h = self.dec[0].forward(b, z).silu();
        let h = self.dec[1].forward(b, h).silu();
        Ok(self.dec[2].forward(b, h).pixel_shuffle(self.config.spatial_factor))
    }

    /// Reconstruction loss: MSE plus the MSE of horizontal and vertical
    /// finite differences.
    pub fn loss<'g, T: Float>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.decode_var(b, self.encode_var(b, x)?)?;
        let mut l = y.mse(x);
        if self.config.edge_weight > 0.0 {
            let e = y.spatial_diff(1).mse(x.spatial_diff(1)).add(y.spatial_diff(2).mse(x.spatial_diff(2)));
            l = l.add(e.scale(self.config.edge_weight));
        }
        Ok(l)
    }

    /// Images `[b, h, w, 3]` in `[0, 1]` to scaled latents.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        ensure!(images.all_finite(), Input, "image contains non-finite values");
        let g = Graph::new();
        let b = Binder::new(&g, &self.params, Trainable::Nothing);
        let s = self.latent_scale();
        Ok(self.encode_var(&b, g.constant(images.clone()))?.value().map(|v| v * s))
    }

    /// Scaled latents to images clamped into `[0, 1]`.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        ensure!(latents.all_finite(), Input, "latent contains non-finite values");
        let g = Graph::new();
        let b = Binder::new(&g, &self.params, Trainable::Nothing);
        let inv = 1.0 / self.latent_scale();
        let z = g.constant(latents.map(|v| v * inv));
        Ok(self.decode_var(&b, z)?.value().map(|v| v.clamp(0.0, 1.0)))
    }

    /// Set `latent_scale` so encoded `images` have unit standard deviation.
    pub fn calibrate(&mut self, images: &Tensor<f32>) -> Result<f32> {
        self.set_latent_scale(1.0);
        let z = self.encode(images)?;
        let n = z.numel() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        ensure!(var > 0.0 && var.is_finite(), Numeric, "latent variance {var} cannot be normalized");
        let s = (1.0 / var.sqrt()) as f32;
        self.set_latent_scale(s);
        Ok(s)
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.config, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let ckpt = checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let config: CodecConfig = ckpt.config_as()?;
        Ok((Codec::from_params(&config, ckpt.params)?, ckpt.meta))
    }
}

/// `10·log10(1/MSE)` for images in `[0, 1]`; `+∞` when identical.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    ensure!(x.shape() == y.shape(), Input, "psnr shapes differ: {:?} vs {:?}", x.shape(), y.shape());
    ensure!(x.numel() > 0, Input, "psnr of empty images");
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
