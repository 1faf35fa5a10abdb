//! Resolution-free upsampling of guidance maps.
//!
//! A hypernetwork reads one guidance map and emits the weights of a small
//! coordinate MLP (the implicit function). Evaluating that MLP on a
//! [`PositionGrid`] of any size yields the upsampled guidance.
//!
//! Hypernetwork layout, per guidance level:
//!
//! 1. `reduce`: linear projection of each guidance token to `reduced_dim`,
//!    plus fixed 2-D sinusoidal position codes.
//! 2. The tokens are joined by `num_learnable_tokens` learnable tokens and
//!    pass through `fusion_depth` pre-norm self-attention layers.
//! 3. Each learnable token goes through a shared head and fills a fixed,
//!    contiguous run of the MLP's flattened weight slots. Predicted weight
//!    matrices are divided by `√fan_in`.
//!
//! [`BiConv`] is the fixed-interpolation baseline: bilinear resize followed
//! by a small convolution stack.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::embedding::{sinusoidal, MAX_PERIOD};
use crate::error::{ensure, Result};
use crate::params::{randn, Binder, Conv, Group, Init, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InrConfig {
    pub reduced_dim: usize,
    pub num_learnable_tokens: usize,
    pub fusion_depth: usize,
    pub heads: usize,
    /// Hidden width of the token-to-slot head.
    pub head_hidden: usize,
    /// Octaves of the coordinate Fourier features.
    pub fourier_bands: usize,
    /// Hidden widths of the coordinate MLP.
    pub mlp_hidden: Vec<usize>,
    pub out_channels: usize,
    pub positional_encoding: bool,
    /// Largest guidance token count accepted by the attention layers.
    pub max_tokens: usize,
}

impl InrConfig {
    pub fn encoding_dim(&self) -> usize {
        2 + 4 * self.fourier_bands
    }

    /// Layer widths of the coordinate MLP, input first.
    pub fn mlp_layout(&self) -> Vec<usize> {
        let mut l = vec![self.encoding_dim()];
        l.extend(&self.mlp_hidden);
        l.push(self.out_channels);
        l
    }

    /// Total weight and bias entries of the coordinate MLP.
    pub fn slot_count(&self) -> usize {
        self.mlp_layout().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Slots filled by each learnable token.
    pub fn chunk(&self) -> usize {
        self.slot_count().div_ceil(self.num_learnable_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.reduced_dim > 0 && self.reduced_dim.is_multiple_of(4), Config, "inr reduced_dim must be a positive multiple of 4, got {}", self.reduced_dim);
        ensure!(self.reduced_dim.is_multiple_of(self.heads.max(1)) && self.heads > 0, Config, "inr heads {} must divide reduced_dim {}", self.heads, self.reduced_dim);
        ensure!(self.num_learnable_tokens > 0, Config, "inr needs at least one learnable token");
        ensure!(self.out_channels > 0 && self.head_hidden > 0, Config, "inr widths must be positive");
        ensure!(self.mlp_hidden.iter().all(|&w| w > 0), Config, "inr mlp widths must be positive");
        ensure!(self.max_tokens > 0, Config, "inr max_tokens must be positive");
        Ok(())
    }
}

/// Cell-center coordinates in `[-1, 1]²`, row-major, each point `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

pub fn cell_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

impl PositionGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        ensure!(height > 0 && width > 0, Input, "grid must be non-empty, got {height}x{width}");
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push([cell_center(y, height), cell_center(x, width)]);
            }
        }
        Ok(PositionGrid { height, width, coords })
    }
}

/// Fourier features `[y, x, sin(π2^k y), cos(π2^k y), sin(π2^k x), cos(π2^k x), …]`.
pub fn encode_coords<T: Float>(coords: &[[f64; 2]], bands: usize) -> Tensor<T> {
    let d = 2 + 4 * bands;
    let mut out = Vec::with_capacity(coords.len() * d);
    for p in coords {
        out.push(T::lit(p[0]));
        out.push(T::lit(p[1]));
        for k in 0..bands {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            for &c in p {
                out.push(T::lit((w * c).sin()));
                out.push(T::lit((w * c).cos()));
            }
        }
    }
    Tensor::new(&[coords.len(), d], out)
}

/// Fixed position codes for an `h×w` raster: row code then column code,
/// `dim/2` channels each.
pub fn token_positions<T: Float>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let rows: Vec<Vec<f64>> = (0..h).map(|i| sinusoidal(i as f64 / MAX_PERIOD, half).expect("even")).collect();
    let cols: Vec<Vec<f64>> = (0..w).map(|j| sinusoidal(j as f64 / MAX_PERIOD, half).expect("even")).collect();
    let mut out = Vec::with_capacity(h * w * dim);
    for r in &rows {
        for c in &cols {
            out.extend(r.iter().chain(c).map(|&v| T::lit(v)));
        }
    }
    Tensor::new(&[h * w, dim], out)
}

/// Coordinate-MLP parameters for every batch element: per layer a weight
/// `[b, in, out]` and a bias `[b, out]`.
pub struct ImplicitFunctionWeights<'g, T: Float> {
    pub layers: Vec<(Var<'g, T>, Var<'g, T>)>,
}

impl<'g, T: Float> ImplicitFunctionWeights<'g, T> {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.value().all_finite() && b.value().all_finite())
    }

    /// Evaluate the MLP at arbitrary points; returns `[b, points, out]`.
    pub fn query_points(&self, coords: &[[f64; 2]], bands: usize) -> Result<Var<'g, T>> {
        ensure!(self.all_finite(), Input, "implicit function weights contain non-finite values");
        let (w0, _) = self.layers[0];
        let graph = w0.graph();
        let batch = w0.shape()[0];
        let enc = encode_coords::<T>(coords, bands);
        let mut rep = Vec::with_capacity(batch * enc.numel());
        for _ in 0..batch {
            rep.extend_from_slice(enc.data());
        }
        let mut x = graph.constant(Tensor::new(&[batch, coords.len(), enc.dim(1)], rep));
        let last = self.layers.len() - 1;
        for (i, &(w, bias)) in self.layers.iter().enumerate() {
            x = x.bmm(w).add_mid(bias);
            if i < last {
                x = x.silu();
            }
        }
        Ok(x)
    }

    /// Evaluate on a grid; returns `[b, h, w, out]`.
    pub fn query(&self, grid: &PositionGrid, bands: usize) -> Result<Var<'g, T>> {
        let y = self.query_points(&grid.coords, bands)?;
        let s = y.shape();
        Ok(y.reshape(&[s[0], grid.height, grid.width, s[2]]))
    }
}

#[derive(Debug, Clone, Copy)]
struct FusionLayer {
    qkv: Linear,
    out: Linear,
}

/// Hypernetwork for one guidance level.
#[derive(Debug, Clone)]
pub struct Hypernetwork {
    pub config: InrConfig,
    pub in_channels: usize,
    reduce: Linear,
    tokens: ParamId,
    layers: Vec<FusionLayer>,
    head_in: Linear,
    head_out: Linear,
}

impl Hypernetwork {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, in_channels: usize, config: &InrConfig) -> Self {
        let d = config.reduced_dim;
        let g = Group::Adapter;
        let reduce = Linear::new(store, rng, &format!("{name}.reduce"), g, in_channels, d, Init::Scaled(1.0));
        let tokens = store.add(format!("{name}.tokens"), g, randn(rng, &[config.num_learnable_tokens, d], 1.0));
        let layers = (0..config.fusion_depth)
            .map(|i| FusionLayer {
                qkv: Linear::new(store, rng, &format!("{name}.attn{i}.qkv"), g, d, 3 * d, Init::Scaled(1.0)),
                out: Linear::new(store, rng, &format!("{name}.attn{i}.out"), g, d, d, Init::Scaled(0.5)),
            })
            .collect();
        let head_in = Linear::new(store, rng, &format!("{name}.head.0"), g, d, config.head_hidden, Init::Scaled(1.0));
        let head_out = Linear::new(store, rng, &format!("{name}.head.1"), g, config.head_hidden, config.chunk(), Init::Scaled(1.0));
        Hypernetwork {
            config: config.clone(),
            in_channels,
            reduce,
            tokens,
            layers,
            head_in,
            head_out,
        }
    }

    /// `[b, h, w, c]` guidance map to `[b, h·w, reduced_dim]` raster tokens.
    pub fn reduce_tokens<'g, T: Float>(&self, b: &Binder<'g, '_, T>, map: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = map.shape();
        ensure!(s.len() == 4, Input, "guidance map must be [b, h, w, c], got {s:?}");
        ensure!(s[3] == self.in_channels, Config, "guidance has {} channels, hypernetwork expects {}", s[3], self.in_channels);
        Ok(self.reduce.forward(b, map.reshape(&[s[0], s[1] * s[2], s[3]])))
    }

    /// Predict coordinate-MLP weights from raster tokens of an `hw` map.
    pub fn predict_weights<'g, T: Float>(
        &self,
        b: &Binder<'g, '_, T>,
        tokens: Var<'g, T>,
        hw: (usize, usize),
    ) -> Result<ImplicitFunctionWeights<'g, T>> {
        let cfg = &self.config;
        let s = tokens.shape();
        ensure!(s.len() == 3 && s[2] == cfg.reduced_dim, Input, "tokens must be [b, n, {}], got {s:?}", cfg.reduced_dim);
        ensure!(s[1] == hw.0 * hw.1, Input, "{} tokens do not form a {}x{} raster", s[1], hw.0, hw.1);
        ensure!(s[1] <= cfg.max_tokens, Input, "{} guidance tokens exceed the limit of {}", s[1], cfg.max_tokens);
        let (batch, n, t) = (s[0], s[1], cfg.num_learnable_tokens);

        let mut x = tokens;
        if cfg.positional_encoding {
            x = x.add(b.graph().constant(token_positions(hw.0, hw.1, cfg.reduced_dim)));
        }
        x = x.concat_rows(b.p(self.tokens));
        for l in &self.layers {
            let a = l.qkv.forward(b, x.layer_norm(LN_EPS)).attention(cfg.heads);
            x = x.add(l.out.forward(b, a));
        }
        let y = x.narrow_rows(n, t).layer_norm(LN_EPS);
        let slots = self
            .head_out
            .forward(b, self.head_in.forward(b, y).silu())
            .reshape(&[batch, t * cfg.chunk()]);

        let mut layers = Vec::new();
        let mut off = 0;
        for w in cfg.mlp_layout().windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let wt = slots
                .narrow_last(off, fi * fo)
                .reshape(&[batch, fi, fo])
                .scale(1.0 / (fi as f64).sqrt());
            off += fi * fo;
            let bias = slots.narrow_last(off, fo);
            off += fo;
            layers.push((wt, bias));
        }
        Ok(ImplicitFunctionWeights { layers })
    }

    /// Full upsampling path: `[b, h, w, c]` map to `[b, th, tw, out]`.
    pub fn upsample<'g, T: Float>(&self, b: &Binder<'g, '_, T>, map: Var<'g, T>, target: (usize, usize)) -> Result<Var<'g, T>> {
        let s = map.shape();
        let tokens = self.reduce_tokens(b, map)?;
        let weights = self.predict_weights(b, tokens, (s[1], s[2]))?;
        weights.query(&PositionGrid::new(target.0, target.1)?, self.config.fourier_bands)
    }
}

/// Bilinear interpolation followed by `h + conv1x1(silu(h))`, `h = conv3x3(·)`.
#[derive(Debug, Clone, Copy)]
pub struct BiConv {
    pub conv3: Conv,
    pub conv1: Conv,
}

impl BiConv {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, in_channels: usize, out_channels: usize) -> Self {
        BiConv {
            conv3: Conv::new(store, rng, &format!("{name}.conv3"), Group::Adapter, 3, in_channels, out_channels, Init::Scaled(1.0)),
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), Group::Adapter, 1, out_channels, out_channels, Init::Scaled(1.0)),
        }
    }

    pub fn upsample<'g, T: Float>(&self, b: &Binder<'g, '_, T>, map: Var<'g, T>, target: (usize, usize)) -> Result<Var<'g, T>> {
        let s = map.shape();
        ensure!(s.len() == 4 && s[3] == self.conv3.cin, Input, "guidance map must be [b, h, w, {}], got {s:?}", self.conv3.cin);
        ensure!(target.0 >= s[1] && target.1 >= s[2], Input, "cannot downscale {}x{} to {}x{}", s[1], s[2], target.0, target.1);
        let h = self.conv3.forward(b, map.resize_bilinear(target.0, target.1));
        Ok(h.add(self.conv1.forward(b, h.silu())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    Inr,
    BiConv,
}

#[derive(Debug, Clone)]
pub enum Upsampler {
    Inr(Hypernetwork),
    BiConv(BiConv),
}

impl Upsampler {
    pub fn upsample<'g, T: Float>(&self, b: &Binder<'g, '_, T>, map: Var<'g, T>, target: (usize, usize)) -> Result<Var<'g, T>> {
        match self {
            Upsampler::Inr(h) => h.upsample(b, map, target),
            Upsampler::BiConv(c) => c.upsample(b, map, target),
        }
    }
}
