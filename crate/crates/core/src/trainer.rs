//! Two-phase training.
//!
//! Phase `base` fits θ at the base latent resolution with the plain
//! denoising objective. Phase `adapter` freezes θ and fits θ′ on
//! multi-resolution latents: each step extracts low-resolution guidance with
//! θ, upsamples it to the step's bucket, and predicts the high-resolution
//! noise with fusion and scale-aware normalization active.
//!
//! Randomness is split into three streams derived from the run seed:
//! `train.data` (bucket and image choice), `train.dropout` (label dropout),
//! and `train.noise` (timesteps and corruption noise). Data order therefore
//! depends only on the seed and dataset size.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::codec::Codec;
use crate::dataset::DatasetSpec;
use crate::error::{ensure, Error, Result};
use crate::image_io::{resize, stack};
use crate::model::{Conditioning, Model, Network, T_EXTRACT};
use crate::modulation::scale_value;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binder, Group, Trainable};
use crate::rng::{stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Adapter,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Phase::Base),
            "adapter" => Ok(Phase::Adapter),
            o => Err(Error::Config(format!("unknown phase {o:?}; expected base or adapter"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Adapter => "adapter",
        })
    }
}

/// Timestep at which guidance is extracted during adapter training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTime {
    Fixed(f64),
    /// Same `t` as the high-resolution corruption of each sample.
    Synced,
}

impl std::str::FromStr for GuidanceTime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "sync" {
            return Ok(GuidanceTime::Synced);
        }
        let t: f64 = s.parse().map_err(|_| Error::Config(format!("bad guidance time {s:?}; expected a number or sync")))?;
        ensure!((0.0..=1.0).contains(&t), Config, "guidance time {t} outside [0, 1]");
        Ok(GuidanceTime::Fixed(t))
    }
}

impl std::fmt::Display for GuidanceTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuidanceTime::Fixed(t) => write!(f, "{t}"),
            GuidanceTime::Synced => f.write_str("sync"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub cond_dropout_p: f64,
    pub t_extract: GuidanceTime,
    pub seed: u64,
    /// Square latent sides of the adapter-phase buckets.
    pub resolution_buckets: Vec<usize>,
    /// Abort after this many consecutive skipped steps.
    pub max_consecutive_skips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Base,
            optim: AdamWConfig::default(),
            batch_size: 4,
            steps: 1000,
            cond_dropout_p: 0.1,
            t_extract: GuidanceTime::Fixed(T_EXTRACT),
            seed: 0,
            resolution_buckets: vec![16, 24, 32],
            max_consecutive_skips: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!((0.0..=0.5).contains(&self.cond_dropout_p), Config, "cond_dropout_p {} outside [0, 0.5]", self.cond_dropout_p);
        ensure!(self.optim.lr > 0.0 && self.optim.lr.is_finite(), Config, "lr must be positive");
        ensure!(!self.resolution_buckets.is_empty(), Config, "at least one resolution bucket is needed");
        if let GuidanceTime::Fixed(t) = self.t_extract {
            ensure!((0.0..=1.0).contains(&t), Config, "t_extract {t} outside [0, 1]");
        }
        Ok(())
    }
}

/// One training batch of clean latents, all at one resolution.
#[derive(Debug, Clone)]
pub struct LatentBatch<T: Float> {
    /// `[b, s, s, c]` target-resolution latents.
    pub hr: Tensor<T>,
    /// `[b, bh, bw, c]` base-resolution latents of the same images.
    pub lr: Tensor<T>,
    pub labels: Vec<usize>,
    /// Labels after conditioning dropout.
    pub cond_labels: Vec<usize>,
}

impl<T: Float> LatentBatch<T> {
    pub fn cast<U: Float>(&self) -> LatentBatch<U> {
        LatentBatch {
            hr: self.hr.cast(),
            lr: self.lr.cast(),
            labels: self.labels.clone(),
            cond_labels: self.cond_labels.clone(),
        }
    }
}

/// Pre-encoded latents per image: one at the base resolution and one per
/// bucket.
#[derive(Debug, Clone)]
pub struct LatentCache {
    pub base_hw: (usize, usize),
    pub buckets: Vec<usize>,
    pub labels: Vec<usize>,
    base: Vec<Tensor<f32>>,
    hr: Vec<Vec<Tensor<f32>>>,
}

impl LatentCache {
    /// Resize every image to each bucket (and to the base size) in pixel
    /// space and encode it.
    pub fn build(dataset: &DatasetSpec, codec: &Codec, base_hw: (usize, usize), buckets: &[usize]) -> Result<Self> {
        let f = codec.config.spatial_factor;
        let encoded = crate::par::map_range(dataset.len(), |i| -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
            let img = dataset.load(i)?;
            let enc = |h: usize, w: usize| -> Result<Tensor<f32>> {
                let x = stack(&[resize(&img, h * f, w * f)?])?;
                let z = codec.encode(&x)?;
                Ok(z.reshape(&z.shape()[1..]))
            };
            let base = enc(base_hw.0, base_hw.1)?;
            let hr = buckets.iter().map(|&s| enc(s, s)).collect::<Result<Vec<_>>>()?;
            Ok((base, hr))
        });
        let mut base = Vec::with_capacity(dataset.len());
        let mut hr = vec![Vec::with_capacity(dataset.len()); buckets.len()];
        for r in encoded {
            let (b, h) = r?;
            base.push(b);
            for (k, z) in h.into_iter().enumerate() {
                hr[k].push(z);
            }
        }
        Self::from_parts(base_hw, (0..dataset.len()).map(|i| dataset.label(i)).collect(), base, buckets.to_vec(), hr)
    }

    pub fn from_parts(
        base_hw: (usize, usize),
        labels: Vec<usize>,
        base: Vec<Tensor<f32>>,
        buckets: Vec<usize>,
        hr: Vec<Vec<Tensor<f32>>>,
    ) -> Result<Self> {
        ensure!(!labels.is_empty(), Input, "latent cache is empty");
        ensure!(base.len() == labels.len() && hr.len() == buckets.len(), Input, "latent cache parts disagree");
        ensure!(hr.iter().all(|h| h.len() == labels.len()), Input, "latent cache parts disagree");
        for &s in &buckets {
            ensure!(s >= base_hw.0 && s >= base_hw.1, Config, "bucket {s} is smaller than the base latent");
        }
        Ok(LatentCache {
            base_hw,
            buckets,
            labels,
            base,
            hr,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, bucket: usize, idx: &[usize], cond_labels: Vec<usize>) -> Result<LatentBatch<f32>> {
        let hr: Vec<Tensor<f32>> = idx.iter().map(|&i| self.hr[bucket][i].clone()).collect();
        let lr: Vec<Tensor<f32>> = idx.iter().map(|&i| self.base[i].clone()).collect();
        Ok(LatentBatch {
            hr: stack_any(&hr)?,
            lr: stack_any(&lr)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            cond_labels,
        })
    }
}

fn stack_any(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    ensure!(!items.is_empty(), Input, "cannot stack zero tensors");
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        ensure!(t.shape() == items[0].shape(), Input, "stacked tensors differ in shape");
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&shape, data))
}

fn uniform_times(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Base-phase objective: mean squared noise error at base resolution, no
/// guidance, no scale conditioning.
pub fn base_loss<'g, T: Float>(
    net: &Network,
    b: &Binder<'g, '_, T>,
    z0: &Tensor<T>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var<'g, T>> {
    let t = uniform_times(rng, labels.len());
    let c = schedule.corrupt_batch(z0, &t, rng)?;
    let cond = Conditioning {
        labels: labels.to_vec(),
        t,
        scale: None,
        guidance: None,
    };
    let g = b.graph();
    let eps_hat = net.predict_epsilon(b, g.constant(c.z_t), &cond)?;
    Ok(eps_hat.mse(g.constant(c.epsilon)))
}

/// Adapter-phase objective.
///
/// Draws `t ~ U[0, 1]` per sample and corrupts the target latent; corrupts
/// the base latent at the guidance time with independent noise and extracts
/// guidance with θ; predicts the target noise with guidance and scale
/// conditioning. Returns the mean squared error.
pub fn adapter_loss<'g, T: Float>(
    net: &Network,
    b: &Binder<'g, '_, T>,
    batch: &LatentBatch<T>,
    schedule: &NoiseSchedule,
    guidance_time: GuidanceTime,
    rng: &mut Rng,
) -> Result<Var<'g, T>> {
    adapter_loss_with(net, b, batch, schedule, guidance_time, rng, |z_t, cond| net.predict_epsilon(b, z_t, &cond))
}

/// [`adapter_loss`] with a replaceable noise predictor.
pub fn adapter_loss_with<'g, T: Float, P>(
    net: &Network,
    b: &Binder<'g, '_, T>,
    batch: &LatentBatch<T>,
    schedule: &NoiseSchedule,
    guidance_time: GuidanceTime,
    rng: &mut Rng,
    predict: P,
) -> Result<Var<'g, T>>
where
    P: FnOnce(Var<'g, T>, Conditioning<'g, T>) -> Result<Var<'g, T>>,
{
    let s = batch.hr.shape().to_vec();
    ensure!(s.len() == 4, Input, "target latents must be [b, h, w, c]");
    let n = s[0];
    let (bh, bw) = net.base_hw();
    let t = uniform_times(rng, n);
    let c = schedule.corrupt_batch(&batch.hr, &t, rng)?;
    let tg = match guidance_time {
        GuidanceTime::Fixed(x) => vec![x; n],
        GuidanceTime::Synced => t.clone(),
    };
    let bundle = net.extract_guidance(b.store(), &batch.lr, &batch.labels, schedule, &tg, rng)?;
    let guidance = net.upsample_guidance(b, &bundle, (s[1], s[2]))?;
    let cond = Conditioning {
        labels: batch.cond_labels.clone(),
        t,
        scale: Some(scale_value(s[1] * s[2], bh * bw)?),
        guidance: Some(guidance),
    };
    let g = b.graph();
    let eps_hat = predict(g.constant(c.z_t), cond)?;
    Ok(eps_hat.mse(g.constant(c.epsilon)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub skipped: bool,
    pub bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub skipped: usize,
    pub first_batch_hash: String,
    pub seconds: f64,
}

impl TrainSummary {
    /// Mean loss over the first or last `n` accepted steps.
    pub fn window_mean(&self, n: usize, last: bool) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        let w = if last { &self.losses[self.losses.len().saturating_sub(n)..] } else { &self.losses[..n.min(self.losses.len())] };
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    opt: AdamW,
    data_rng: Rng,
    drop_rng: Rng,
    noise_rng: Rng,
    step: usize,
    skipped: usize,
    consecutive_skips: usize,
    first_batch_hash: Option<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let seed = config.seed;
        Ok(Trainer {
            opt: AdamW::new(config.optim.clone()),
            data_rng: stream(seed, "train.data"),
            drop_rng: stream(seed, "train.dropout"),
            noise_rng: stream(seed, "train.noise"),
            config,
            schedule,
            step: 0,
            skipped: 0,
            consecutive_skips: 0,
            first_batch_hash: None,
        })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Draw the next bucket and batch. Bucket and indices come from the data
    /// stream only.
    pub fn next_batch(&mut self, cache: &LatentCache, null_label: usize) -> Result<(usize, LatentBatch<f32>)> {
        let bucket = match self.config.phase {
            Phase::Base => 0,
            Phase::Adapter => self.data_rng.random_range(0..cache.buckets.len()),
        };
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.data_rng.random_range(0..cache.len())).collect();
        let p = self.config.cond_dropout_p;
        let cond: Vec<usize> = idx
            .iter()
            .map(|&i| if self.drop_rng.random::<f64>() < p { null_label } else { cache.labels[i] })
            .collect();
        if self.first_batch_hash.is_none() {
            let mut h = Sha256::new();
            h.update((cache.buckets[bucket] as u64).to_le_bytes());
            for (&i, &l) in idx.iter().zip(&cond) {
                h.update((i as u64).to_le_bytes());
                h.update((l as u64).to_le_bytes());
            }
            self.first_batch_hash = Some(hex::encode(h.finalize()));
        }
        Ok((cache.buckets[bucket], cache.batch(bucket, &idx, cond)?))
    }

    pub fn train_step(&mut self, model: &mut Model, cache: &LatentCache) -> Result<StepRecord> {
        ensure!(cache.base_hw == model.net.base_hw(), Config, "latent cache base size differs from the model's");
        let (bucket, batch) = self.next_batch(cache, model.net.null_label())?;
        let phase = self.config.phase;
        let (loss, grads) = {
            let g = Graph::new();
            let (b, loss) = match phase {
                Phase::Base => {
                    let b = Binder::new(&g, &model.params, Trainable::Only(Group::Base));
                    let l = base_loss(&model.net, &b, &batch.lr, &batch.cond_labels, &self.schedule, &mut self.noise_rng)?;
                    (b, l)
                }
                Phase::Adapter => {
                    let b = Binder::new(&g, &model.params, Trainable::Only(Group::Adapter));
                    let l = adapter_loss(&model.net, &b, &batch, &self.schedule, self.config.t_extract, &mut self.noise_rng)?;
                    (b, l)
                }
            };
            let value = loss.value().item() as f64;
            let mut gr = g.backward(loss);
            (value, b.collect(&mut gr))
        };
        self.step += 1;
        let finite = loss.is_finite() && grads.iter().all(|(_, g)| g.all_finite());
        if finite {
            self.opt.step(&mut model.params, &grads);
            self.consecutive_skips = 0;
        } else {
            self.skipped += 1;
            self.consecutive_skips += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped", self.step);
            ensure!(
                self.consecutive_skips <= self.config.max_consecutive_skips,
                Numeric,
                "{} consecutive non-finite steps at step {} (last loss {loss})",
                self.consecutive_skips,
                self.step
            );
        }
        Ok(StepRecord {
            step: self.step,
            phase,
            loss,
            lr: self.config.optim.lr,
            skipped: !finite,
            bucket,
        })
    }

    /// Run `config.steps` steps, handing each record to `on_step`.
    pub fn run(&mut self, model: &mut Model, cache: &LatentCache, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<TrainSummary> {
        let start = Instant::now();
        let mut losses = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let r = self.train_step(model, cache)?;
            if !r.skipped {
                losses.push(r.loss);
            }
            on_step(&r)?;
        }
        Ok(TrainSummary {
            losses,
            skipped: self.skipped,
            first_batch_hash: self.first_batch_hash.clone().unwrap_or_default(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training crops, in pixels.
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 4000,
            batch_size: 8,
            crop: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Fit the codec on random crops of `images` (`[h, w, 3]` each), then
/// calibrate its latent scale on center crops. Returns per-step losses.
pub fn train_codec(codec: &mut Codec, images: &[Tensor<f32>], config: &CodecTrainConfig, mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    let f = codec.config.spatial_factor;
    ensure!(config.crop.is_multiple_of(f) && config.crop > 0, Config, "crop {} is not a multiple of the codec factor {f}", config.crop);
    ensure!(!images.is_empty(), Input, "no training images");
    ensure!(
        images.iter().all(|im| im.dim(0) >= config.crop && im.dim(1) >= config.crop),
        Input,
        "every image must be at least {} pixels on a side",
        config.crop
    );
    let mut rng = stream(config.seed, "codec.data");
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..Default::default()
    });
    let crop = |im: &Tensor<f32>, y: usize, x: usize| {
        let w = im.dim(1);
        let mut out = Vec::with_capacity(config.crop * config.crop * 3);
        for r in y..y + config.crop {
            out.extend_from_slice(&im.data()[(r * w + x) * 3..(r * w + x + config.crop) * 3]);
        }
        Tensor::new(&[config.crop, config.crop, 3], out)
    };
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        // Cosine decay to zero; the final iterate is what gets calibrated.
        opt.config.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        let crops: Vec<Tensor<f32>> = (0..config.batch_size)
            .map(|_| {
                let im = &images[rng.random_range(0..images.len())];
                let y = rng.random_range(0..=im.dim(0) - config.crop);
                let x = rng.random_range(0..=im.dim(1) - config.crop);
                crop(im, y, x)
            })
            .collect();
        let x = stack(&crops)?;
        let (loss, grads) = {
            let g = Graph::new();
            let b = Binder::new(&g, &codec.params, Trainable::Everything);
            let l = codec.loss(&b, g.constant(x))?;
            let v = l.value().item() as f64;
            let mut gr = g.backward(l);
            let grads: Vec<_> = b
                .collect(&mut gr)
                .into_iter()
                .filter(|(id, _)| codec.params.get(*id).name != "codec.latent_scale")
                .collect();
            (v, grads)
        };
        ensure!(loss.is_finite(), Numeric, "codec loss became {loss} at step {step}");
        opt.step(&mut codec.params, &grads);
        losses.push(loss);
        on_step(step, loss);
    }
    let centers: Vec<Tensor<f32>> = images
        .iter()
        .take(64)
        .map(|im| crop(im, (im.dim(0) - config.crop) / 2, (im.dim(1) - config.crop) / 2))
        .collect();
    codec.calibrate(&stack(&centers)?)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{normal_vec, rng_from_seed};

    fn tiny_cache(n: usize) -> LatentCache {
        let mut rng = rng_from_seed(3);
        let mut z = |s: usize| Tensor::new(&[s, s, 4], normal_vec(&mut rng, s * s * 4));
        let base = (0..n).map(|_| z(4)).collect();
        let hr = vec![(0..n).map(|_| z(4)).collect(), (0..n).map(|_| z(6)).collect()];
        LatentCache::from_parts((4, 4), (0..n).map(|i| i % 2).collect(), base, vec![4, 6], hr).unwrap()
    }

    fn tiny_config(phase: Phase) -> TrainConfig {
        TrainConfig {
            phase,
            optim: AdamWConfig { lr: 1e-3, ..Default::default() },
            batch_size: 2,
            steps: 3,
            resolution_buckets: vec![4, 6],
            ..Default::default()
        }
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let cache = tiny_cache(4);
        let batch = cache.batch(1, &[0, 1], vec![0, 1]).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &m.params, Trainable::Nothing);
        let s = NoiseSchedule::default();
        // Replay the noise draw to hand the predictor the true ε.
        let mut rng = rng_from_seed(1);
        let t = uniform_times(&mut rng.clone(), 2);
        let mut probe = rng.clone();
        uniform_times(&mut probe, 2);
        let eps = s.corrupt_batch(&batch.hr, &t, &mut probe).unwrap().epsilon;
        let l = adapter_loss_with(&m.net, &b, &batch, &s, GuidanceTime::Fixed(T_EXTRACT), &mut rng, |_, _| Ok(g.constant(eps.clone()))).unwrap();
        assert_eq!(l.value().item(), 0.0);
        // ε̂ = 0 gives the mean of ε², close to 1 for many elements.
        let big = LatentBatch {
            hr: Tensor::zeros(&[64, 6, 6, 4]),
            lr: Tensor::zeros(&[64, 4, 4, 4]),
            labels: vec![0; 64],
            cond_labels: vec![0; 64],
        };
        let l = adapter_loss_with(&m.net, &b, &big, &s, GuidanceTime::Fixed(T_EXTRACT), &mut rng_from_seed(2), |z, _| Ok(z.scale(0.0))).unwrap();
        assert!((l.value().item() - 1.0).abs() < 0.05, "{}", l.value().item());
    }

    #[test]
    fn adapter_phase_freezes_base_and_moves_adapter() {
        let mut m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let before = m.params.clone();
        let cache = tiny_cache(4);
        let mut tr = Trainer::new(tiny_config(Phase::Adapter), NoiseSchedule::default()).unwrap();
        tr.run(&mut m, &cache, |_| Ok(())).unwrap();
        let mut moved = 0;
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            match a.group {
                Group::Base => assert_eq!(a.value, b.value, "{}", a.name),
                Group::Adapter => moved += (a.value != b.value) as usize,
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn base_phase_leaves_adapter_alone() {
        let mut m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let before = m.params.clone();
        let mut tr = Trainer::new(tiny_config(Phase::Base), NoiseSchedule::default()).unwrap();
        tr.run(&mut m, &tiny_cache(4), |_| Ok(())).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            if a.group == Group::Adapter {
                assert_eq!(a.value, b.value);
            }
        }
        assert!(before.iter().zip(m.params.iter()).any(|((_, a), (_, b))| a.value != b.value));
    }

    #[test]
    fn same_seed_same_losses_and_first_batch() {
        let run = |seed| {
            let mut m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
            let mut c = tiny_config(Phase::Adapter);
            c.seed = seed;
            let mut tr = Trainer::new(c, NoiseSchedule::default()).unwrap();
            tr.run(&mut m, &tiny_cache(4), |_| Ok(())).unwrap()
        };
        let (a, b) = (run(5), run(5));
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.first_batch_hash, b.first_batch_hash);
        assert_ne!(a.first_batch_hash, run(6).first_batch_hash);
    }

    #[test]
    fn config_parsing_and_validation() {
        assert_eq!("sync".parse::<GuidanceTime>().unwrap(), GuidanceTime::Synced);
        assert_eq!("0.5".parse::<GuidanceTime>().unwrap(), GuidanceTime::Fixed(0.5));
        assert!("1.5".parse::<GuidanceTime>().is_err());
        let bad = TrainConfig { cond_dropout_p: 0.7, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(TrainConfig::default().optim.lr, 1e-4);
    }

    #[test]
    fn codec_training_reduces_loss() {
        let mut c = Codec::new(&crate::codec::CodecConfig { hidden: 16, ..Default::default() }, 0).unwrap();
        let imgs: Vec<_> = (0..4).map(|i| crate::dataset::render(i % 2, 2, 32, i as u64)).collect();
        let cfg = CodecTrainConfig { steps: 60, batch_size: 2, crop: 16, lr: 3e-3, seed: 0 };
        let l = train_codec(&mut c, &imgs, &cfg, |_, _| {}).unwrap();
        assert!(l[50..].iter().sum::<f64>() < l[..10].iter().sum::<f64>());
    }
}
