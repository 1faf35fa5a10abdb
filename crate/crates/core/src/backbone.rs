//! Denoising network: conv + self-attention blocks at a single spatial
//! scale, with feature hooks after attention blocks and injection points for
//! the high-resolution adapters.
//!
//! Layout (tokens are `[b, h·w, c]`, maps `[b, h, w, c]`):
//!
//! ```text
//! conv3x3 in
//! repeat num_attention_blocks:
//!     res block:  x + conv1x1(silu(conv3x3(mod(LN x))))
//!     attn block: x + out(attn(qkv(mod(LN x)))), then x + ff(LN x)
//!     [hook], [fusion + time modulation]
//! LN, silu, conv3x3 out
//! ```
//!
//! `mod` is adaptive modulation `h + h ⊙ a(c) + b(c)` from the conditioning
//! vector `c = mlp(e_t) + label_table[label]`. Scale-aware normalization,
//! when active, is applied to the normalized activation right before `mod`.
//! Block `2i` is the `i`-th res block and `2i+1` the `i`-th attention block
//! for scale-aware normalization indexing.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::embedding;
use crate::error::{ensure, Result};
use crate::modulation::{Fusion, Modulation};
use crate::params::{randn, Binder, Conv, Group, Init, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Float;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_latent_hw: (usize, usize),
    pub latent_channels: usize,
    pub channels: usize,
    pub num_attention_blocks: usize,
    /// Attention-block indices whose outputs are captured as guidance.
    pub hook_levels: Vec<usize>,
    /// Label count including the trailing null label.
    pub cond_vocab: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub res_expansion: usize,
    pub ff_expansion: usize,
}

impl BackboneConfig {
    pub fn null_label(&self) -> usize {
        self.cond_vocab - 1
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.num_attention_blocks
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_attention_blocks >= 1, Config, "backbone needs at least one attention block");
        ensure!(!self.hook_levels.is_empty(), Config, "backbone hook_levels must be non-empty");
        ensure!(
            self.hook_levels.iter().all(|&l| l < self.num_attention_blocks),
            Config,
            "hook_levels {:?} reference missing attention blocks",
            self.hook_levels
        );
        ensure!(
            self.hook_levels.windows(2).all(|w| w[0] < w[1]),
            Config,
            "hook_levels must be strictly increasing"
        );
        ensure!(self.cond_vocab >= 2, Config, "cond_vocab must be at least 2, got {}", self.cond_vocab);
        ensure!(self.embed_dim >= 2 && self.embed_dim.is_multiple_of(2), Config, "embed_dim must be even, got {}", self.embed_dim);
        ensure!(
            self.heads >= 1 && self.channels.is_multiple_of(self.heads),
            Config,
            "heads {} must divide channels {}",
            self.heads,
            self.channels
        );
        ensure!(self.base_latent_hw.0 >= 1 && self.base_latent_hw.1 >= 1, Config, "base latent must be non-empty");
        ensure!(
            self.latent_channels >= 1 && self.res_expansion >= 1 && self.ff_expansion >= 1,
            Config,
            "backbone widths must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    ada: Linear,
    conv_a: Conv,
    conv_b: Conv,
}

#[derive(Debug, Clone, Copy)]
struct AttnBlock {
    ada: Linear,
    qkv: Linear,
    out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    conv_in: Conv,
    time_in: Linear,
    time_out: Linear,
    labels: ParamId,
    res: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    conv_out: Conv,
}

/// Scale-aware normalization layers (one per block) and the scale embedding.
pub struct SanInput<'a, 'g, T: Float> {
    pub layers: &'a [Modulation],
    pub e_s: Var<'g, T>,
}

/// Upsampled guidance, one map per hook level at the working resolution,
/// with the per-level fusion and time-modulation layers.
pub struct GuideInput<'a, 'g, T: Float> {
    pub fusion: &'a [Fusion],
    pub time_mod: &'a [Modulation],
    pub maps: &'a [Var<'g, T>],
}

#[derive(Default)]
pub struct Injection<'a, 'g, T: Float> {
    pub san: Option<SanInput<'a, 'g, T>>,
    pub guide: Option<GuideInput<'a, 'g, T>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut Rng, config: &BackboneConfig) -> Self {
        let (c, e, lc) = (config.channels, config.embed_dim, config.latent_channels);
        let g = Group::Base;
        let conv_in = Conv::new(store, rng, "backbone.conv_in", g, 3, lc, c, Init::Scaled(1.0));
        let time_in = Linear::new(store, rng, "backbone.time.0", g, e, c, Init::Scaled(1.0));
        let time_out = Linear::new(store, rng, "backbone.time.1", g, c, c, Init::Scaled(1.0));
        let labels = store.add("backbone.labels", g, randn(rng, &[config.cond_vocab, c], 1.0));
        let mut res = Vec::new();
        let mut attn = Vec::new();
        for i in 0..config.num_attention_blocks {
            let p = format!("backbone.res{i}");
            let wide = c * config.res_expansion;
            res.push(ResBlock {
                ada: Linear::new(store, rng, &format!("{p}.ada"), g, c, 2 * c, Init::Zero),
                conv_a: Conv::new(store, rng, &format!("{p}.conv_a"), g, 3, c, wide, Init::Scaled(1.0)),
                conv_b: Conv::new(store, rng, &format!("{p}.conv_b"), g, 3, wide, c, Init::Scaled(0.5)),
            });
            let p = format!("backbone.attn{i}");
            let ff = c * config.ff_expansion;
            attn.push(AttnBlock {
                ada: Linear::new(store, rng, &format!("{p}.ada"), g, c, 2 * c, Init::Zero),
                qkv: Linear::new(store, rng, &format!("{p}.qkv"), g, c, 3 * c, Init::Scaled(1.0)),
                out: Linear::new(store, rng, &format!("{p}.out"), g, c, c, Init::Scaled(0.5)),
                ff_in: Linear::new(store, rng, &format!("{p}.ff.0"), g, c, ff, Init::Scaled(1.0)),
                ff_out: Linear::new(store, rng, &format!("{p}.ff.1"), g, ff, c, Init::Scaled(0.5)),
            });
        }
        let conv_out = Conv::new(store, rng, "backbone.conv_out", g, 3, c, lc, Init::Scaled(0.5));
        Backbone {
            config: config.clone(),
            conv_in,
            time_in,
            time_out,
            labels,
            res,
            attn,
            conv_out,
        }
    }

    /// Predict the noise in `z` (`[b, h, w, latent_channels]`).
    ///
    /// `hooks`, when given, receives the post-residual output of every
    /// hooked attention block, in hook order, before any guidance fusion.
    pub fn forward<'g, T: Float>(
        &self,
        b: &Binder<'g, '_, T>,
        z: Var<'g, T>,
        labels: &[usize],
        t: &[f64],
        inj: &Injection<'_, 'g, T>,
        mut hooks: Option<&mut Vec<Var<'g, T>>>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let s = z.shape();
        ensure!(
            s.len() == 4 && s[3] == cfg.latent_channels,
            Input,
            "latent must be [b, h, w, {}], got {s:?}",
            cfg.latent_channels
        );
        let (batch, h, w) = (s[0], s[1], s[2]);
        ensure!(
            h >= cfg.base_latent_hw.0 && w >= cfg.base_latent_hw.1,
            Input,
            "latent {h}x{w} is smaller than the base latent {}x{}",
            cfg.base_latent_hw.0,
            cfg.base_latent_hw.1
        );
        ensure!(labels.len() == batch && t.len() == batch, Input, "need one label and one t per batch element");
        ensure!(labels.iter().all(|&l| l < cfg.cond_vocab), Input, "label outside the vocabulary of {}", cfg.cond_vocab);
        for &ti in t {
            ensure!((0.0..=1.0).contains(&ti), Domain, "t = {ti} outside [0, 1]");
        }
        if let Some(san) = &inj.san {
            ensure!(san.layers.len() == cfg.num_blocks(), Internal, "expected {} scale-aware layers", cfg.num_blocks());
        }
        if let Some(g) = &inj.guide {
            ensure!(
                g.maps.len() == cfg.hook_levels.len() && g.fusion.len() == g.maps.len() && g.time_mod.len() == g.maps.len(),
                Input,
                "expected {} guidance maps, got {}",
                cfg.hook_levels.len(),
                g.maps.len()
            );
            for m in g.maps {
                let ms = m.shape();
                ensure!(
                    ms.len() == 4 && ms[0] == batch && ms[1] == h && ms[2] == w,
                    Input,
                    "guidance map {ms:?} does not match latent {batch}x{h}x{w}"
                );
            }
        }

        let graph = b.graph();
        let e_t = graph.constant(embedding::batch::<T>(t, cfg.embed_dim)?);
        let cond = self
            .time_out
            .forward(b, self.time_in.forward(b, e_t).silu())
            .add(b.p(self.labels).gather_rows(labels))
            .silu();
        let c = cfg.channels;
        let n = h * w;
        let modulate = |x: Var<'g, T>, ada: &Linear, block: usize| {
            let mut hh = x.layer_norm(LN_EPS);
            if let Some(san) = &inj.san {
                hh = san.layers[block].forward(b, hh, san.e_s);
            }
            let a = ada.forward(b, cond);
            hh.add(hh.mul_mid(a.narrow_last(0, c))).add_mid(a.narrow_last(c, c))
        };

        let mut x = self.conv_in.forward(b, z).reshape(&[batch, n, c]);
        for i in 0..cfg.num_attention_blocks {
            let r = &self.res[i];
            let hh = modulate(x, &r.ada, 2 * i).reshape(&[batch, h, w, c]);
            let hh = r.conv_b.forward(b, r.conv_a.forward(b, hh).silu());
            x = x.add(hh.reshape(&[batch, n, c]));

            let a = &self.attn[i];
            let hh = modulate(x, &a.ada, 2 * i + 1);
            x = x.add(a.out.forward(b, a.qkv.forward(b, hh).attention(cfg.heads)));
            let ff = a.ff_out.forward(b, a.ff_in.forward(b, x.layer_norm(LN_EPS)).silu());
            x = x.add(ff);

            if let Some(k) = cfg.hook_levels.iter().position(|&l| l == i) {
                if let Some(hk) = hooks.as_deref_mut() {
                    hk.push(x);
                }
                if let Some(g) = &inj.guide {
                    let gm = g.maps[k];
                    let gc = gm.shape()[3];
                    x = g.fusion[k].forward(b, x, gm.reshape(&[batch, n, gc]))?;
                    x = g.time_mod[k].forward(b, x, e_t);
                }
            }
        }
        let x = x.layer_norm(LN_EPS).silu().reshape(&[batch, h, w, c]);
        Ok(self.conv_out.forward(b, x))
    }
}
