//! Two-stage generation: base-resolution sampling, guidance extraction,
//! guided high-resolution sampling, and decoding to a PNG.
//!
//! Each request owns its random sources, derived from the request seed:
//! `pipeline.lr` for base sampling, `pipeline.extract` for the guidance
//! re-corruption, and `pipeline.hr` for high-resolution sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Codec;
use crate::error::{ensure, Error, Result};
use crate::image_io::{save_png, unstack};
use crate::inr::UpsamplerKind;
use crate::model::{GuidanceBundle, Model, T_EXTRACT};
use crate::modulation::scale_value;
use crate::rng::stream;
use crate::sampler::{sample, HrGuidance, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Per-request switches for the guided branch. None of them changes a
/// parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationFlags {
    pub guidance: bool,
    /// Must match the upsampler the checkpoint was built with.
    pub upsampler: UpsamplerKind,
    pub san: bool,
    pub t_extract: f64,
}

impl GenerationFlags {
    pub fn for_model(model: &Model) -> Self {
        GenerationFlags {
            guidance: true,
            upsampler: model.config().upsampler,
            san: model.config().san,
            t_extract: T_EXTRACT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub label: usize,
    pub target_image_hw: (usize, usize),
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub flags: GenerationFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub lr_sampling: f64,
    pub extraction: f64,
    pub hr_sampling: f64,
    pub decode: f64,
    pub write: f64,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub image: PathBuf,
    pub sidecar: PathBuf,
    pub timings: StageTimings,
    pub config_hash: String,
}

/// Number of sampler runs per stage since construction.
#[derive(Debug, Default)]
pub struct StageCounters {
    pub lr_runs: AtomicUsize,
    pub hr_runs: AtomicUsize,
}

pub struct Pipeline<'a> {
    pub model: &'a Model,
    pub codec: &'a Codec,
    pub schedule: NoiseSchedule,
    pub counters: StageCounters,
}

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a Model, codec: &'a Codec, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        let lc = model.config().backbone.latent_channels;
        ensure!(
            codec.config.latent_channels == lc,
            Config,
            "codec produces {} latent channels, model expects {lc}",
            codec.config.latent_channels
        );
        Ok(Pipeline {
            model,
            codec,
            schedule,
            counters: StageCounters::default(),
        })
    }

    /// Latent size of a request's target image.
    pub fn target_latent_hw(&self, request: &GenerationRequest) -> Result<(usize, usize)> {
        let f = self.codec.config.spatial_factor;
        let (h, w) = request.target_image_hw;
        ensure!(h % f == 0 && w % f == 0 && h > 0 && w > 0, Input, "image size {h}x{w} is not a multiple of the codec factor {f}");
        Ok((h / f, w / f))
    }

    fn validate(&self, request: &GenerationRequest) -> Result<()> {
        request.sampler.validate()?;
        let null = self.model.net.null_label();
        ensure!(request.label < null, Input, "label {} outside 0..{null}", request.label);
        ensure!(
            request.flags.upsampler == self.model.config().upsampler,
            Config,
            "request asks for the {:?} upsampler but the checkpoint was built with {:?}",
            request.flags.upsampler,
            self.model.config().upsampler
        );
        ensure!(!request.flags.san || self.model.config().san, Config, "request enables scale-aware normalization but the checkpoint has none");
        ensure!((0.0..=1.0).contains(&request.flags.t_extract), Config, "t_extract {} outside [0, 1]", request.flags.t_extract);
        Ok(())
    }

    /// Sample a base-resolution latent, then re-corrupt it at `t_extract` and
    /// extract guidance from it exactly as training does.
    pub fn generate_lr(&self, request: &GenerationRequest) -> Result<(Tensor<f32>, GuidanceBundle<f32>)> {
        self.validate(request)?;
        let z0 = self.sample_lr(request)?;
        let bundle = self.extract(&z0, request)?;
        Ok((z0, bundle))
    }

    fn sample_lr(&self, request: &GenerationRequest) -> Result<Tensor<f32>> {
        self.counters.lr_runs.fetch_add(1, Ordering::Relaxed);
        let net = &self.model.net;
        sample(net, &self.model.params, &self.schedule, &request.sampler, &[request.label], net.base_hw(), None, &mut stream(request.seed, "pipeline.lr"))
    }

    fn extract(&self, z0: &Tensor<f32>, request: &GenerationRequest) -> Result<GuidanceBundle<f32>> {
        self.model.net.extract_guidance(
            &self.model.params,
            z0,
            &[request.label],
            &self.schedule,
            &[request.flags.t_extract],
            &mut stream(request.seed, "pipeline.extract"),
        )
    }

    /// Sample the target-resolution latent `[1, h, w, c]` guided by `guidance`.
    pub fn generate_hr(&self, guidance: &GuidanceBundle<f32>, request: &GenerationRequest) -> Result<Tensor<f32>> {
        self.validate(request)?;
        let net = &self.model.net;
        let (bh, bw) = net.base_hw();
        let (h, w) = self.target_latent_hw(request)?;
        ensure!(h >= bh && w >= bw, Domain, "target latent {h}x{w} is smaller than the base latent {bh}x{bw}");
        for (_, m) in &guidance.levels {
            ensure!(m.dim(1) == bh && m.dim(2) == bw, Input, "guidance must be at the base latent {bh}x{bw}");
        }
        self.counters.hr_runs.fetch_add(1, Ordering::Relaxed);
        let scale = request.flags.san.then(|| scale_value(h * w, bh * bw)).transpose()?;
        let bundle = request.flags.guidance.then_some(guidance);
        let hr = (bundle.is_some() || scale.is_some()).then_some(HrGuidance { bundle, scale });
        sample(net, &self.model.params, &self.schedule, &request.sampler, &[request.label], (h, w), hr, &mut stream(request.seed, "pipeline.hr"))
    }

    /// Run both stages, decode, and write `out` plus a `<out>.meta` sidecar.
    pub fn end_to_end(&self, request: &GenerationRequest, out: &Path) -> Result<GenerationOutput> {
        let mut timings = StageTimings::default();
        let clock = Instant::now();
        let lr_start = Instant::now();
        self.validate(request)?;
        self.target_latent_hw(request)?;
        let z0 = self.sample_lr(request)?;
        timings.lr_sampling = lr_start.elapsed().as_secs_f64();

        let t = Instant::now();
        let bundle = self.extract(&z0, request)?;
        timings.extraction = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let z_hr = self.generate_hr(&bundle, request)?;
        timings.hr_sampling = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let img = unstack(&self.codec.decode(&z_hr)?, 0);
        ensure!(img.all_finite(), Numeric, "decoded image contains non-finite values");
        timings.decode = t.elapsed().as_secs_f64();

        let t = Instant::now();
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_png(out, &img)?;
        timings.write = t.elapsed().as_secs_f64();

        let config_hash = self.config_hash(request)?;
        let sidecar = sidecar_path(out);
        let mut meta = String::new();
        let _ = writeln!(meta, "image = {}", out.display());
        let _ = writeln!(meta, "seed = {}", request.seed);
        let _ = writeln!(meta, "label = {}", request.label);
        let _ = writeln!(meta, "size = {}x{}", request.target_image_hw.0, request.target_image_hw.1);
        let _ = writeln!(meta, "config_hash = {config_hash}");
        let _ = writeln!(meta, "time.lr_sampling = {:.6}", timings.lr_sampling);
        let _ = writeln!(meta, "time.extraction = {:.6}", timings.extraction);
        let _ = writeln!(meta, "time.hr_sampling = {:.6}", timings.hr_sampling);
        let _ = writeln!(meta, "time.decode = {:.6}", timings.decode);
        let _ = writeln!(meta, "time.write = {:.6}", timings.write);
        let _ = writeln!(meta, "time.total = {:.6}", clock.elapsed().as_secs_f64());
        fs::write(&sidecar, meta).map_err(|e| Error::io(&sidecar, e))?;
        Ok(GenerationOutput {
            image: out.to_path_buf(),
            sidecar,
            timings,
            config_hash,
        })
    }

    /// SHA-256 over the model, codec, schedule, and request configuration.
    pub fn config_hash(&self, request: &GenerationRequest) -> Result<String> {
        let v = serde_json::json!({
            "model": self.model.config(),
            "codec": self.codec.config,
            "schedule": self.schedule,
            "request": request,
        });
        let bytes = serde_json::to_vec(&v).map_err(|e| Error::Internal(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}
