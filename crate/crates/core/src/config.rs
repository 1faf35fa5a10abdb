//! Flat run configuration.
//!
//! A config file is UTF-8 text of `key = value` lines; `#` starts a comment
//! and blank lines are ignored. Keys are namespaced by module
//! (`trainer.lr`, `sampler.steps`, ...). Later sources override earlier ones
//! and unknown keys are rejected. Lists are comma separated.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::AblationConfig;
use crate::codec::CodecConfig;
use crate::dataset::SyntheticSpec;
use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::trainer::{CodecTrainConfig, GuidanceTime, Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model_preset: String,
    pub data_root: PathBuf,
    pub data_classes: usize,
    pub data_per_class: usize,
    pub data_sizes: Vec<usize>,
    pub codec_hidden: usize,
    pub codec_steps: usize,
    pub codec_batch_size: usize,
    pub codec_crop: usize,
    pub codec_lr: f64,
    /// Images at the end of the dataset kept out of codec training.
    pub codec_holdout: usize,
    pub schedule_offset: f64,
    pub schedule_clip_min: f64,
    pub trainer_phase: Phase,
    pub trainer_lr: f64,
    pub trainer_weight_decay: f64,
    pub trainer_batch_size: usize,
    pub trainer_steps: usize,
    pub trainer_cond_dropout_p: f64,
    pub trainer_t_extract: GuidanceTime,
    pub trainer_buckets: Vec<usize>,
    pub trainer_max_consecutive_skips: usize,
    pub sampler_steps: usize,
    pub sampler_cfg: f64,
    pub sampler_eta: f64,
    pub sampler_guide_uncond: bool,
    pub ablation_steps: usize,
    pub ablation_window: usize,
    pub ablation_widths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sampler = SamplerConfig::default();
        let codec = CodecTrainConfig::default();
        let data = SyntheticSpec::default();
        let schedule = NoiseSchedule::default();
        RunConfig {
            seed: 0,
            model_preset: "desk".into(),
            data_root: PathBuf::from("data"),
            data_classes: data.classes,
            data_per_class: data.per_class,
            data_sizes: data.sizes,
            codec_hidden: CodecConfig::default().hidden,
            codec_steps: codec.steps,
            codec_batch_size: codec.batch_size,
            codec_crop: codec.crop,
            codec_lr: codec.lr,
            codec_holdout: 100,
            schedule_offset: schedule.offset,
            schedule_clip_min: schedule.clip_min,
            trainer_phase: train.phase,
            trainer_lr: train.optim.lr,
            trainer_weight_decay: train.optim.weight_decay,
            trainer_batch_size: train.batch_size,
            trainer_steps: train.steps,
            trainer_cond_dropout_p: train.cond_dropout_p,
            trainer_t_extract: train.t_extract,
            trainer_buckets: train.resolution_buckets,
            trainer_max_consecutive_skips: train.max_consecutive_skips,
            sampler_steps: sampler.steps,
            sampler_cfg: sampler.cfg_weight,
            sampler_eta: sampler.eta,
            sampler_guide_uncond: sampler.guide_uncond,
            ablation_steps: 100,
            ablation_window: 25,
            ablation_widths: vec![512, 1024],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn s(v: impl Display) -> String {
    v.to_string()
}

/// Split config text into `(key, value)` pairs.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        ensure!(!k.is_empty(), Config, "{origin}:{}: empty key", n + 1);
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parse a command-line override of the form `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_text(&text, &path.display().to_string())? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.preset" => self.model_preset = v.to_string(),
            "data.root" => self.data_root = PathBuf::from(v),
            "data.classes" => self.data_classes = parse(key, v)?,
            "data.per_class" => self.data_per_class = parse(key, v)?,
            "data.sizes" => self.data_sizes = parse_list(key, v)?,
            "codec.hidden" => self.codec_hidden = parse(key, v)?,
            "codec.steps" => self.codec_steps = parse(key, v)?,
            "codec.batch_size" => self.codec_batch_size = parse(key, v)?,
            "codec.crop" => self.codec_crop = parse(key, v)?,
            "codec.lr" => self.codec_lr = parse(key, v)?,
            "codec.holdout" => self.codec_holdout = parse(key, v)?,
            "schedule.offset" => self.schedule_offset = parse(key, v)?,
            "schedule.clip_min" => self.schedule_clip_min = parse(key, v)?,
            "trainer.phase" => self.trainer_phase = v.parse()?,
            "trainer.lr" => self.trainer_lr = parse(key, v)?,
            "trainer.weight_decay" => self.trainer_weight_decay = parse(key, v)?,
            "trainer.batch_size" => self.trainer_batch_size = parse(key, v)?,
            "trainer.steps" => self.trainer_steps = parse(key, v)?,
            "trainer.cond_dropout_p" => self.trainer_cond_dropout_p = parse(key, v)?,
            "trainer.t_extract" => self.trainer_t_extract = v.parse()?,
            "trainer.buckets" => self.trainer_buckets = parse_list(key, v)?,
            "trainer.max_consecutive_skips" => self.trainer_max_consecutive_skips = parse(key, v)?,
            "sampler.steps" => self.sampler_steps = parse(key, v)?,
            "sampler.cfg" => self.sampler_cfg = parse(key, v)?,
            "sampler.eta" => self.sampler_eta = parse(key, v)?,
            "sampler.guide_uncond" => self.sampler_guide_uncond = parse(key, v)?,
            "ablation.steps" => self.ablation_steps = parse(key, v)?,
            "ablation.window" => self.ablation_window = parse(key, v)?,
            "ablation.widths" => self.ablation_widths = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every effective value, in a form [`RunConfig::set`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", s(self.seed)),
            ("model.preset", self.model_preset.clone()),
            ("data.root", self.data_root.display().to_string()),
            ("data.classes", s(self.data_classes)),
            ("data.per_class", s(self.data_per_class)),
            ("data.sizes", list(&self.data_sizes)),
            ("codec.hidden", s(self.codec_hidden)),
            ("codec.steps", s(self.codec_steps)),
            ("codec.batch_size", s(self.codec_batch_size)),
            ("codec.crop", s(self.codec_crop)),
            ("codec.lr", s(self.codec_lr)),
            ("codec.holdout", s(self.codec_holdout)),
            ("schedule.offset", s(self.schedule_offset)),
            ("schedule.clip_min", s(self.schedule_clip_min)),
            ("trainer.phase", s(self.trainer_phase)),
            ("trainer.lr", s(self.trainer_lr)),
            ("trainer.weight_decay", s(self.trainer_weight_decay)),
            ("trainer.batch_size", s(self.trainer_batch_size)),
            ("trainer.steps", s(self.trainer_steps)),
            ("trainer.cond_dropout_p", s(self.trainer_cond_dropout_p)),
            ("trainer.t_extract", s(self.trainer_t_extract)),
            ("trainer.buckets", list(&self.trainer_buckets)),
            ("trainer.max_consecutive_skips", s(self.trainer_max_consecutive_skips)),
            ("sampler.steps", s(self.sampler_steps)),
            ("sampler.cfg", s(self.sampler_cfg)),
            ("sampler.eta", s(self.sampler_eta)),
            ("sampler.guide_uncond", s(self.sampler_guide_uncond)),
            ("ablation.steps", s(self.ablation_steps)),
            ("ablation.window", s(self.ablation_window)),
            ("ablation.widths", list(&self.ablation_widths)),
        ]
    }

    /// The effective configuration as config-file text.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.model_preset)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule {
            offset: self.schedule_offset,
            clip_min: self.schedule_clip_min,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.data_classes,
            per_class: self.data_per_class,
            sizes: self.data_sizes.clone(),
            seed: self.seed,
        }
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            hidden: self.codec_hidden,
            ..Default::default()
        }
    }

    pub fn codec_train(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.codec_steps,
            batch_size: self.codec_batch_size,
            crop: self.codec_crop,
            lr: self.codec_lr,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            phase: self.trainer_phase,
            optim: AdamWConfig {
                lr: self.trainer_lr,
                weight_decay: self.trainer_weight_decay,
                ..Default::default()
            },
            batch_size: self.trainer_batch_size,
            steps: self.trainer_steps,
            cond_dropout_p: self.trainer_cond_dropout_p,
            t_extract: self.trainer_t_extract,
            seed: self.seed,
            resolution_buckets: self.trainer_buckets.clone(),
            max_consecutive_skips: self.trainer_max_consecutive_skips,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let s = SamplerConfig {
            steps: self.sampler_steps,
            cfg_weight: self.sampler_cfg,
            eta: self.sampler_eta,
            guide_uncond: self.sampler_guide_uncond,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn ablation(&self) -> Result<AblationConfig> {
        Ok(AblationConfig {
            train: TrainConfig {
                steps: self.ablation_steps,
                ..self.train()?
            },
            window: self.ablation_window,
        })
    }
}
