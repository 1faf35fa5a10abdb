//! The full denoiser: frozen base backbone plus the high-resolution adapter
//! (per-level upsampler, guidance fusion, time modulation, and scale-aware
//! normalization).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::backbone::{Backbone, BackboneConfig, GuideInput, Injection, SanInput};
use crate::embedding;
use crate::error::{ensure, Error, Result};
use crate::inr::{BiConv, Hypernetwork, InrConfig, Upsampler, UpsamplerKind};
use crate::modulation::{Fusion, Modulation};
use crate::params::{Binder, Group, ParamStore, Trainable};
use crate::rng::{stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Float, Tensor};

/// Default timestep at which low-resolution guidance is extracted.
pub const T_EXTRACT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub inr: InrConfig,
    pub upsampler: UpsamplerKind,
    /// Build scale-aware normalization layers.
    pub san: bool,
}

pub const PRESETS: &[&str] = &["tiny", "desk", "ours-512", "ours-1024", "paper-proportioned"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk_backbone = BackboneConfig {
            base_latent_hw: (16, 16),
            latent_channels: 4,
            channels: 32,
            num_attention_blocks: 2,
            hook_levels: vec![0, 1],
            cond_vocab: 3,
            embed_dim: 16,
            heads: 1,
            res_expansion: 4,
            ff_expansion: 4,
        };
        let desk_inr = InrConfig {
            reduced_dim: 16,
            num_learnable_tokens: 32,
            fusion_depth: 1,
            heads: 1,
            head_hidden: 16,
            fourier_bands: 2,
            mlp_hidden: vec![32, 32],
            out_channels: 32,
            positional_encoding: true,
            max_tokens: 4096,
        };
        let wide_inr = |d: usize| InrConfig {
            reduced_dim: d,
            num_learnable_tokens: 64,
            heads: 4,
            head_hidden: 64,
            mlp_hidden: vec![64, 64],
            ..desk_inr.clone()
        };
        let cfg = match name {
            "tiny" => ModelConfig {
                backbone: BackboneConfig {
                    base_latent_hw: (4, 4),
                    latent_channels: 4,
                    channels: 8,
                    num_attention_blocks: 2,
                    hook_levels: vec![0, 1],
                    cond_vocab: 3,
                    embed_dim: 8,
                    heads: 1,
                    res_expansion: 2,
                    ff_expansion: 2,
                },
                inr: InrConfig {
                    reduced_dim: 8,
                    num_learnable_tokens: 4,
                    fusion_depth: 1,
                    heads: 1,
                    head_hidden: 8,
                    fourier_bands: 1,
                    mlp_hidden: vec![8],
                    out_channels: 8,
                    positional_encoding: true,
                    max_tokens: 4096,
                },
                upsampler: UpsamplerKind::Inr,
                san: true,
            },
            "desk" => ModelConfig {
                backbone: desk_backbone,
                inr: desk_inr,
                upsampler: UpsamplerKind::Inr,
                san: true,
            },
            "ours-512" | "ours-1024" => ModelConfig {
                backbone: desk_backbone,
                inr: wide_inr(if name == "ours-512" { 512 } else { 1024 }),
                upsampler: UpsamplerKind::Inr,
                san: true,
            },
            "paper-proportioned" => ModelConfig {
                backbone: BackboneConfig {
                    base_latent_hw: (24, 24),
                    channels: 512,
                    num_attention_blocks: 4,
                    hook_levels: vec![0, 1, 2, 3],
                    embed_dim: 64,
                    heads: 8,
                    ..desk_backbone
                },
                inr: InrConfig {
                    out_channels: 512,
                    ..wide_inr(1024)
                },
                upsampler: UpsamplerKind::Inr,
                san: true,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.inr.validate()
    }
}

#[derive(Debug, Clone)]
pub struct LevelAdapter {
    pub upsampler: Upsampler,
    pub fusion: Fusion,
    pub time_mod: Modulation,
}

/// Low-resolution features captured after the hooked attention blocks.
#[derive(Debug, Clone)]
pub struct GuidanceBundle<T: Float> {
    /// `(attention block index, [b, h, w, c] map)` per hook level.
    pub levels: Vec<(usize, Tensor<T>)>,
    /// Corruption time per batch element.
    pub extraction_t: Vec<f64>,
}

/// Inputs to one ε-prediction besides the noisy latent.
pub struct Conditioning<'g, T: Float> {
    pub labels: Vec<usize>,
    pub t: Vec<f64>,
    /// Scale value; drives scale-aware normalization when present.
    pub scale: Option<f64>,
    /// Upsampled guidance maps at the latent's resolution, one per hook level.
    pub guidance: Option<Vec<Var<'g, T>>>,
}

/// Frozen and trainable parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub frozen_names: BTreeSet<String>,
    pub trainable_names: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub frozen: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// Module name to (entry count, group).
    pub modules: BTreeMap<String, (usize, Group)>,
}

/// Architecture of the full model; parameter values live in a
/// [`ParamStore`] so one network can run at several precisions.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub adapters: Vec<LevelAdapter>,
    pub san: Vec<Modulation>,
}

impl Network {
    /// Build the architecture and draw initial values. Backbone and adapter
    /// draws use separate streams, so adapter options never change θ.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Network, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut stream(seed, "init.backbone"), &config.backbone);
        let mut rng: Rng = stream(seed, "init.adapter");
        let bb = &config.backbone;
        let adapters = (0..bb.hook_levels.len())
            .map(|k| {
                let p = format!("adapter.level{k}");
                let upsampler = match config.upsampler {
                    UpsamplerKind::Inr => Upsampler::Inr(Hypernetwork::new(&mut store, &mut rng, &format!("{p}.inr"), bb.channels, &config.inr)),
                    UpsamplerKind::BiConv => Upsampler::BiConv(BiConv::new(&mut store, &mut rng, &format!("{p}.bi_conv"), bb.channels, config.inr.out_channels)),
                };
                LevelAdapter {
                    upsampler,
                    fusion: Fusion::new(&mut store, &mut rng, &format!("{p}.fusion"), bb.channels, config.inr.out_channels),
                    time_mod: Modulation::new(&mut store, &mut rng, &format!("{p}.time_mod"), bb.embed_dim, bb.channels),
                }
            })
            .collect();
        let san = if config.san {
            (0..bb.num_blocks())
                .map(|i| Modulation::new(&mut store, &mut rng, &format!("san.block{i}"), bb.embed_dim, bb.channels))
                .collect()
        } else {
            Vec::new()
        };
        let net = Network {
            config: config.clone(),
            backbone,
            adapters,
            san,
        };
        net.partition(&store)?;
        Ok((net, store))
    }

    pub fn base_hw(&self) -> (usize, usize) {
        self.config.backbone.base_latent_hw
    }

    pub fn null_label(&self) -> usize {
        self.config.backbone.null_label()
    }

    /// ε-prediction for `z` (`[b, h, w, latent_channels]`).
    pub fn predict_epsilon<'g, T: Float>(&self, b: &Binder<'g, '_, T>, z: Var<'g, T>, cond: &Conditioning<'g, T>) -> Result<Var<'g, T>> {
        self.forward(b, z, cond, None)
    }

    fn forward<'g, T: Float>(
        &self,
        b: &Binder<'g, '_, T>,
        z: Var<'g, T>,
        cond: &Conditioning<'g, T>,
        hooks: Option<&mut Vec<Var<'g, T>>>,
    ) -> Result<Var<'g, T>> {
        let batch = z.shape()[0];
        let san = match cond.scale {
            Some(s) if !self.san.is_empty() => Some(SanInput {
                layers: &self.san,
                e_s: b.graph().constant(embedding::batch::<T>(&vec![s; batch], self.config.backbone.embed_dim)?),
            }),
            _ => None,
        };
        let fusion: Vec<Fusion> = self.adapters.iter().map(|a| a.fusion).collect();
        let time_mod: Vec<Modulation> = self.adapters.iter().map(|a| a.time_mod).collect();
        let guide = cond.guidance.as_deref().map(|maps| GuideInput {
            fusion: &fusion,
            time_mod: &time_mod,
            maps,
        });
        let inj = Injection { san, guide };
        self.backbone.forward(b, z, &cond.labels, &cond.t, &inj, hooks)
    }

    /// Corrupt a base-resolution clean latent at `t_extract` (one value per
    /// batch element) and capture the hooked features of a θ-only pass.
    pub fn extract_guidance<T: Float>(
        &self,
        store: &ParamStore<T>,
        z0_lr: &Tensor<T>,
        labels: &[usize],
        schedule: &NoiseSchedule,
        t_extract: &[f64],
        rng: &mut Rng,
    ) -> Result<GuidanceBundle<T>> {
        let s = z0_lr.shape();
        let (bh, bw) = self.base_hw();
        ensure!(s.len() == 4 && s[1] == bh && s[2] == bw, Input, "guidance source must be at the base latent {bh}x{bw}, got {s:?}");
        let noisy = schedule.corrupt_batch(z0_lr, t_extract, rng)?;
        self.guidance_from_noisy(store, &noisy.z_t, labels, t_extract)
    }

    /// Hooked features of a θ-only pass over an already corrupted latent.
    pub fn guidance_from_noisy<T: Float>(&self, store: &ParamStore<T>, z_t: &Tensor<T>, labels: &[usize], t: &[f64]) -> Result<GuidanceBundle<T>> {
        let g = Graph::new();
        let b = Binder::new(&g, store, Trainable::Nothing);
        let cond = Conditioning {
            labels: labels.to_vec(),
            t: t.to_vec(),
            scale: None,
            guidance: None,
        };
        let mut hooks = Vec::new();
        self.forward(&b, g.constant(z_t.clone()), &cond, Some(&mut hooks))?;
        Ok(GuidanceBundle {
            levels: self.config.backbone.hook_levels.iter().zip(hooks).map(|(&l, v)| {
                let s = z_t.shape();
                (l, v.value().reshape(&[s[0], s[1], s[2], self.config.backbone.channels]))
            }).collect(),
            extraction_t: t.to_vec(),
        })
    }

    /// Upsample every guidance level to `target` through its adapter.
    pub fn upsample_guidance<'g, T: Float>(&self, b: &Binder<'g, '_, T>, bundle: &GuidanceBundle<T>, target: (usize, usize)) -> Result<Vec<Var<'g, T>>> {
        ensure!(bundle.levels.len() == self.adapters.len(), Input, "bundle has {} levels, model has {}", bundle.levels.len(), self.adapters.len());
        bundle
            .levels
            .iter()
            .zip(&self.adapters)
            .map(|((_, m), a)| a.upsampler.upsample(b, b.graph().constant(m.clone()), target))
            .collect()
    }

    /// Split parameter names into θ and θ′, checking that every parameter
    /// sits in the group its module implies.
    pub fn partition<T: Float>(&self, store: &ParamStore<T>) -> Result<ParameterPartition> {
        let mut frozen_names = BTreeSet::new();
        let mut trainable_names = BTreeSet::new();
        for (_, p) in store.iter() {
            let expected = if p.name.starts_with("backbone.") {
                Group::Base
            } else if p.name.starts_with("adapter.") || p.name.starts_with("san.") {
                Group::Adapter
            } else {
                return Err(Error::Internal(format!("parameter {} belongs to no module", p.name)));
            };
            ensure!(p.group == expected, Internal, "parameter {} is in the wrong group", p.name);
            match p.group {
                Group::Base => frozen_names.insert(p.name.clone()),
                Group::Adapter => trainable_names.insert(p.name.clone()),
            };
        }
        Ok(ParameterPartition { frozen_names, trainable_names })
    }
}

/// Parameter counts for a store, with a per-module breakdown.
pub fn report_params<T: Float>(store: &ParamStore<T>) -> ParamReport {
    let frozen = store.count(Group::Base);
    let trainable = store.count(Group::Adapter);
    let mut modules: BTreeMap<String, (usize, Group)> = BTreeMap::new();
    for (_, p) in store.iter() {
        let parts: Vec<&str> = p.name.split('.').collect();
        let depth = if parts[0] == "adapter" { 3 } else { 2 };
        let key = parts[..depth.min(parts.len() - 1).max(1)].join(".");
        modules.entry(key).or_insert((0, p.group)).0 += p.value.numel();
    }
    let total = frozen + trainable;
    ParamReport {
        frozen,
        trainable,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        modules,
    }
}

/// A network together with its single-precision parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = Network::build(config, seed)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self.config(), meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let ckpt = checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let config: ModelConfig = ckpt.config_as()?;
        let mut model = Model::new(&config, 0)?;
        model.load_params(&ckpt.params)?;
        Ok((model, ckpt.meta))
    }

    /// Copy every parameter of `other` into this model. Names, shapes and
    /// groups must match and the set must be complete.
    pub fn load_params(&mut self, other: &ParamStore<f32>) -> Result<()> {
        ensure!(
            other.len() == self.params.len(),
            Config,
            "parameter set has {} entries, model expects {}",
            other.len(),
            self.params.len()
        );
        self.load_group(other, None)
    }

    /// Copy the parameters of `group` (or all, for `None`) from `other`,
    /// which must contain each of them.
    pub fn load_group(&mut self, other: &ParamStore<f32>, group: Option<Group>) -> Result<()> {
        let names: Vec<(String, Group)> = self
            .params
            .iter()
            .filter(|(_, p)| group.is_none_or(|g| p.group == g))
            .map(|(_, p)| (p.name.clone(), p.group))
            .collect();
        for (name, g) in names {
            let src = other.by_name(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            ensure!(src.group == g, Config, "parameter {name} has the wrong frozen flag");
            let id = self.params.id(&name).expect("listed above");
            let dst = self.params.get_mut(id);
            ensure!(dst.value.shape() == src.value.shape(), Config, "parameter {name} has shape {:?}, expected {:?}", src.value.shape(), dst.value.shape());
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_KIND: &str = "model";
