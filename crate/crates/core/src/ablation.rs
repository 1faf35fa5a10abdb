//! Ablation sweep over guidance-extraction time, upsampler, scale-aware
//! normalization, and upsampler width.
//!
//! Every variant starts from the same base weights θ, trains freshly
//! initialized adapters for the same step budget with the same seed, and so
//! sees the same data order.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::inr::UpsamplerKind;
use crate::model::{report_params, Model, ModelConfig, T_EXTRACT};
use crate::params::Group;
use crate::schedule::NoiseSchedule;
use crate::trainer::{GuidanceTime, LatentCache, Phase, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub t_extract: GuidanceTime,
    pub upsampler: UpsamplerKind,
    pub san: bool,
    /// Token width of the upsampler's hypernetwork.
    pub width: usize,
}

impl Variant {
    pub fn name(&self) -> String {
        let up = match self.upsampler {
            UpsamplerKind::Inr => "inr",
            UpsamplerKind::BiConv => "bi_conv",
        };
        format!("t={},{up},san={},w={}", self.t_extract, if self.san { "on" } else { "off" }, self.width)
    }

    /// The base configuration with this variant's adapter settings. θ shapes
    /// are unchanged.
    pub fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut inr = ModelConfig::preset("ours-1024")?.inr;
        inr.reduced_dim = self.width;
        inr.out_channels = base.backbone.channels;
        let cfg = ModelConfig {
            backbone: base.backbone.clone(),
            inr,
            upsampler: self.upsampler,
            san: self.san,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The full grid: {synced, 0.5, 0.05} × {inr, bi_conv} × {san on, off} ×
/// `widths`.
pub fn full_grid(widths: &[usize]) -> Vec<Variant> {
    let mut out = Vec::new();
    for t_extract in [GuidanceTime::Synced, GuidanceTime::Fixed(0.5), GuidanceTime::Fixed(T_EXTRACT)] {
        for upsampler in [UpsamplerKind::Inr, UpsamplerKind::BiConv] {
            for san in [true, false] {
                for &width in widths {
                    out.push(Variant {
                        t_extract,
                        upsampler,
                        san,
                        width,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Shared training settings; phase and t_extract are set per variant.
    pub train: TrainConfig,
    /// Steps averaged for the first- and last-window loss.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant: String,
    pub t_extract: String,
    pub upsampler: UpsamplerKind,
    pub san: bool,
    pub width: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub frozen_params: usize,
    pub trainable_params: usize,
    pub first_window_loss: Option<f64>,
    pub last_window_loss: Option<f64>,
    pub skipped_steps: usize,
    pub seconds: f64,
    pub first_batch_hash: String,
    pub losses: Vec<f64>,
}

fn run_variant(base: &Model, cache: &LatentCache, v: &Variant, config: &AblationConfig, schedule: &NoiseSchedule, rec: &mut VariantRecord) -> Result<()> {
    let mut model = Model::new(&v.model_config(base.config())?, config.train.seed)?;
    model.load_group(&base.params, Some(Group::Base))?;
    let report = report_params(&model.params);
    rec.frozen_params = report.frozen;
    rec.trainable_params = report.trainable;
    let tc = TrainConfig {
        phase: Phase::Adapter,
        t_extract: v.t_extract,
        ..config.train.clone()
    };
    let mut trainer = Trainer::new(tc, *schedule)?;
    let summary = trainer.run(&mut model, cache, |_| Ok(()))?;
    rec.skipped_steps = summary.skipped;
    rec.first_batch_hash = summary.first_batch_hash.clone();
    if !summary.losses.is_empty() {
        rec.first_window_loss = Some(summary.window_mean(config.window, false));
        rec.last_window_loss = Some(summary.window_mean(config.window, true));
    }
    rec.losses = summary.losses;
    Ok(())
}

/// Train every variant from the base weights of `base`. A failing variant is
/// recorded with its error and the sweep continues.
pub fn run_ablation(
    base: &Model,
    cache: &LatentCache,
    variants: &[Variant],
    config: &AblationConfig,
    schedule: &NoiseSchedule,
    mut on_record: impl FnMut(&VariantRecord) -> Result<()>,
) -> Result<Vec<VariantRecord>> {
    config.train.validate()?;
    ensure!(config.window >= 1, Config, "ablation window must be at least 1");
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let start = Instant::now();
        let mut rec = VariantRecord {
            variant: v.name(),
            t_extract: v.t_extract.to_string(),
            upsampler: v.upsampler,
            san: v.san,
            width: v.width,
            ok: false,
            error: None,
            frozen_params: 0,
            trainable_params: 0,
            first_window_loss: None,
            last_window_loss: None,
            skipped_steps: 0,
            seconds: 0.0,
            first_batch_hash: String::new(),
            losses: Vec::new(),
        };
        let result = catch_unwind(AssertUnwindSafe(|| run_variant(base, cache, v, config, schedule, &mut rec)));
        match result {
            Ok(Ok(())) => rec.ok = true,
            Ok(Err(e)) => rec.error = Some(e.to_string()),
            Err(p) => {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                rec.error = Some(format!("panic: {}", msg.unwrap_or_default()));
            }
        }
        rec.seconds = start.elapsed().as_secs_f64();
        if let Some(e) = &rec.error {
            log::warn!("variant {} failed: {e}", rec.variant);
        }
        on_record(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

/// For each axis, the setting with the lowest mean last-window loss across
/// the successful variants that share it.
pub fn trends(records: &[VariantRecord]) -> BTreeMap<String, String> {
    let mut axes: BTreeMap<&str, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok) {
        let Some(l) = r.last_window_loss else { continue };
        let keys = [
            ("t_extract", r.t_extract.clone()),
            ("upsampler", format!("{:?}", r.upsampler)),
            ("san", r.san.to_string()),
            ("width", r.width.to_string()),
        ];
        for (axis, k) in keys {
            let e = axes.entry(axis).or_default().entry(k).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
    }
    axes.into_iter()
        .filter_map(|(axis, m)| {
            m.into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| (axis.to_string(), k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::rng::{normal_vec, rng_from_seed};
    use crate::tensor::Tensor;

    fn cache() -> LatentCache {
        let mut rng = rng_from_seed(3);
        let mut z = |s: usize| Tensor::new(&[s, s, 4], normal_vec(&mut rng, s * s * 4));
        let base = (0..4).map(|_| z(4)).collect();
        let hr = vec![(0..4).map(|_| z(6)).collect()];
        LatentCache::from_parts((4, 4), vec![0, 1, 0, 1], base, vec![6], hr).unwrap()
    }

    #[test]
    fn grid_is_complete() {
        let g = full_grid(&[512, 1024]);
        assert_eq!(g.len(), 24);
        let names: std::collections::BTreeSet<_> = g.iter().map(|v| v.name()).collect();
        assert_eq!(names.len(), 24);
    }

    #[test]
    fn variants_share_theta_and_data_order() {
        let base = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let cfg = AblationConfig {
            train: TrainConfig {
                batch_size: 2,
                steps: 2,
                optim: AdamWConfig { lr: 1e-3, ..Default::default() },
                resolution_buckets: vec![6],
                ..Default::default()
            },
            window: 1,
        };
        let grid = full_grid(&[8, 16]);
        let recs = run_ablation(&base, &cache(), &grid, &cfg, &NoiseSchedule::default(), |_| Ok(())).unwrap();
        assert!(recs.iter().all(|r| r.ok), "{:?}", recs.iter().find(|r| !r.ok));
        assert!(recs.iter().all(|r| r.first_batch_hash == recs[0].first_batch_hash));
        assert!(recs.iter().all(|r| r.frozen_params == recs[0].frozen_params));
        let t = |w, up| recs.iter().find(|r| r.width == w && r.upsampler == up && r.san).unwrap().trainable_params;
        assert!(t(8, UpsamplerKind::Inr) < t(16, UpsamplerKind::Inr));
        assert_eq!(trends(&recs).len(), 4);
    }

    #[test]
    fn failing_variant_is_recorded_and_sweep_continues() {
        let base = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let cfg = AblationConfig {
            train: TrainConfig { batch_size: 1, steps: 1, resolution_buckets: vec![6], ..Default::default() },
            window: 1,
        };
        // Width 6 is not a multiple of 4, so that variant cannot be built.
        let mut grid = full_grid(&[6]);
        grid.truncate(1);
        grid.push(Variant { width: 8, ..grid[0] });
        let recs = run_ablation(&base, &cache(), &grid, &cfg, &NoiseSchedule::default(), |_| Ok(())).unwrap();
        assert!(!recs[0].ok && recs[0].error.is_some());
        assert!(recs[1].ok);
    }
}
