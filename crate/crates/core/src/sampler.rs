//! DDIM sampling over continuous time with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{ensure, Result};
use crate::model::{Conditioning, GuidanceBundle, Network};
use crate::params::{Binder, ParamStore, Trainable};
use crate::rng::{normal_vec_f64, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_weight: f64,
    pub eta: f64,
    /// First time of the uniform schedule; the last is 0.
    pub t_max: f64,
    /// Feed guidance to the null-label branch as well.
    pub guide_uncond: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            cfg_weight: 4.0,
            eta: 0.0,
            t_max: 1.0 - 1e-3,
            guide_uncond: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "sampler steps must be at least 1");
        ensure!(self.t_max > 0.0 && self.t_max <= 1.0, Config, "sampler t_max must lie in (0, 1], got {}", self.t_max);
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), Config, "sampler eta must be non-negative, got {}", self.eta);
        ensure!(self.cfg_weight.is_finite(), Config, "cfg weight must be finite");
        Ok(())
    }

    /// `steps + 1` strictly decreasing times from `t_max` to 0.
    pub fn t_schedule(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n).map(|i| if i == n { 0.0 } else { self.t_max * (n - i) as f64 / n as f64 }).collect()
    }
}

/// `eps_u + w·(eps_c − eps_u)`; exact at `w ∈ {0, 1}`.
pub fn cfg_combine<T: Float>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    ensure!(
        eps_cond.shape() == eps_uncond.shape(),
        Input,
        "conditional shape {:?} differs from unconditional shape {:?}",
        eps_cond.shape(),
        eps_uncond.shape()
    );
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let w = T::lit(w);
    Ok(eps_cond.zip_map(eps_uncond, |c, u| u + w * (c - u)))
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step<T: Float>(schedule: &NoiseSchedule, z_t: &Tensor<T>, eps_hat: &Tensor<T>, t: f64, t_prev: f64) -> Result<Tensor<T>> {
    ddim_step_eta(schedule, z_t, eps_hat, t, t_prev, 0.0, None)
}

fn ddim_step_eta<T: Float>(
    schedule: &NoiseSchedule,
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: f64,
    t_prev: f64,
    eta: f64,
    rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    ensure!(t_prev < t, Domain, "t_prev = {t_prev} must be below t = {t}");
    ensure!(z_t.shape() == eps_hat.shape(), Input, "noise estimate shape differs from latent shape");
    let a_t = schedule.alpha_bar(t)?;
    let a_p = schedule.alpha_bar(t_prev)?;
    let sigma = eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).sqrt();
    let (ra_t, rb_t) = (T::lit(a_t.sqrt()), T::lit((1.0 - a_t).sqrt()));
    let ra_p = T::lit(a_p.sqrt());
    let rb_p = T::lit((1.0 - a_p - sigma * sigma).max(0.0).sqrt());
    let mut out = z_t.zip_map(eps_hat, |z, e| {
        let x0 = (z - rb_t * e) / ra_t;
        ra_p * x0 + rb_p * e
    });
    if sigma > 0.0 {
        if let Some(rng) = rng {
            let noise = normal_vec_f64(rng, out.numel());
            for (o, n) in out.data_mut().iter_mut().zip(noise) {
                *o += T::lit(sigma * n);
            }
        }
    }
    Ok(out)
}

/// Run the sampler from `z_start` with an arbitrary noise predictor
/// `predict(z_t, t)`.
pub fn ddim_loop<T: Float, F>(schedule: &NoiseSchedule, config: &SamplerConfig, z_start: Tensor<T>, rng: &mut Rng, mut predict: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    config.validate()?;
    let ts = config.t_schedule();
    let mut z = z_start;
    for w in ts.windows(2) {
        let eps = predict(&z, w[0])?;
        z = ddim_step_eta(schedule, &z, &eps, w[0], w[1], config.eta, Some(&mut *rng))?;
    }
    Ok(z)
}

/// High-resolution conditioning for [`sample`].
pub struct HrGuidance<'a, T: Float> {
    pub bundle: Option<&'a GuidanceBundle<T>>,
    /// Scale value for scale-aware normalization, if active.
    pub scale: Option<f64>,
}

/// Draw latents `[b, h, w, latent_channels]` from pure noise.
#[allow(clippy::too_many_arguments)]
pub fn sample<T: Float>(
    net: &Network,
    store: &ParamStore<T>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    labels: &[usize],
    target_hw: (usize, usize),
    hr: Option<HrGuidance<'_, T>>,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    config.validate()?;
    let batch = labels.len();
    ensure!(batch > 0, Input, "sample needs at least one label");
    let lc = net.config.backbone.latent_channels;
    let shape = [batch, target_hw.0, target_hw.1, lc];
    let z_start = Tensor::new(&shape, normal_vec_f64(rng, shape.iter().product()).into_iter().map(T::lit).collect());

    // Upsampled guidance is time-independent: compute it once.
    let (guide, scale) = match &hr {
        Some(h) => {
            let maps = match h.bundle {
                Some(bundle) => {
                    let g = Graph::new();
                    let b = Binder::new(&g, store, Trainable::Nothing);
                    Some(net.upsample_guidance(&b, bundle, target_hw)?.into_iter().map(|v| v.value()).collect::<Vec<Tensor<T>>>())
                }
                None => None,
            };
            (maps, h.scale)
        }
        None => (None, None),
    };
    let null = net.null_label();
    let w = config.cfg_weight;

    ddim_loop(schedule, config, z_start, rng, |z, t| {
        let g = Graph::new();
        let b = Binder::new(&g, store, Trainable::Nothing);
        let run = |z: Tensor<T>, labels: Vec<usize>, with_guide: bool, reps: usize| -> Result<Tensor<T>> {
            let guidance = match (&guide, with_guide) {
                (Some(maps), true) => Some(maps.iter().map(|m| g.constant(repeat(m, reps))).collect()),
                _ => None,
            };
            let n = labels.len();
            let cond = Conditioning {
                labels,
                t: vec![t; n],
                scale,
                guidance,
            };
            Ok(net.predict_epsilon(&b, g.constant(z), &cond)?.value())
        };
        if w == 1.0 {
            return run(z.clone(), labels.to_vec(), true, 1);
        }
        let (ec, eu) = if config.guide_uncond || guide.is_none() {
            let mut both = labels.to_vec();
            both.extend(std::iter::repeat_n(null, batch));
            let out = run(repeat(z, 2), both, true, 2)?;
            split_half(&out)
        } else {
            (run(z.clone(), labels.to_vec(), true, 1)?, run(z.clone(), vec![null; batch], false, 1)?)
        };
        cfg_combine(&ec, &eu, w)
    })
}

/// Stack `reps` copies of `x` along the leading axis.
fn repeat<T: Float>(x: &Tensor<T>, reps: usize) -> Tensor<T> {
    if reps == 1 {
        return x.clone();
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= reps;
    let mut data = Vec::with_capacity(x.numel() * reps);
    for _ in 0..reps {
        data.extend_from_slice(x.data());
    }
    Tensor::new(&shape, data)
}

fn split_half<T: Float>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut shape = x.shape().to_vec();
    shape[0] /= 2;
    let half = x.numel() / 2;
    (
        Tensor::new(&shape, x.data()[..half].to_vec()),
        Tensor::new(&shape, x.data()[half..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, T_EXTRACT};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn schedule_shape() {
        let c = SamplerConfig { steps: 4, ..Default::default() };
        let ts = c.t_schedule();
        assert_eq!(ts.len(), 5);
        assert_eq!(ts[0], 1.0 - 1e-3);
        assert_eq!(*ts.last().unwrap(), 0.0);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let c = Tensor::new(&[3], vec![0.1f32, 0.7, -2.3]);
        let u = Tensor::new(&[3], vec![1.3f32, -0.2, 0.9]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert!(matches!(cfg_combine(&c, &Tensor::zeros(&[2]), 4.0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn degenerate_step_rescales() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(&[2], vec![0.4f64, -1.0]);
        let out = ddim_step(&s, &z, &Tensor::zeros(&[2]), 0.6, 0.0).unwrap();
        let a = s.alpha_bar(0.6).unwrap().sqrt();
        assert!((out.data()[0] - 0.4 / a).abs() < 1e-12);
        assert!(matches!(ddim_step(&s, &z, &z, 0.3, 0.3), Err(crate::Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn single_step_inverts_corruption(seed in any::<u64>(), t in 1e-3f64..=1.0) {
            let s = NoiseSchedule::default();
            let z0 = Tensor::from_fn(&[6], |i| (i as f64 * 0.9).cos());
            let c = s.corrupt(&z0, t, &mut rng_from_seed(seed)).unwrap();
            let rec = ddim_step(&s, &c.z_t, &c.epsilon, t, 0.0).unwrap();
            for (r, z) in rec.data().iter().zip(z0.data()) {
                prop_assert!((r - z).abs() <= 1e-5 * z.abs().max(1.0));
            }
        }

        #[test]
        fn cfg_is_affine_in_w(w in -8.0f64..8.0) {
            let c = Tensor::new(&[2], vec![0.25f64, -1.5]);
            let u = Tensor::new(&[2], vec![1.0f64, 0.5]);
            let m = cfg_combine(&c, &u, w).unwrap();
            // m − w·(c − u) recovers u.
            let back = m.zip_map(&c.zip_map(&u, |a, b| a - b), |x, d| x - w * d);
            prop_assert!(back.max_abs_diff(&u) < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_multi_resolution() {
        let m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let s = NoiseSchedule::default();
        let cfg = SamplerConfig { steps: 3, ..Default::default() };
        let z0 = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f32 * 0.3).sin());
        let bundle = m.net.extract_guidance(&m.params, &z0, &[0], &s, &[T_EXTRACT], &mut rng_from_seed(2)).unwrap();
        for hw in [(8, 8), (12, 12)] {
            let run = || {
                let hr = HrGuidance { bundle: Some(&bundle), scale: Some(0.5) };
                sample(&m.net, &m.params, &s, &cfg, &[0], hw, Some(hr), &mut rng_from_seed(5)).unwrap()
            };
            let a = run();
            assert_eq!(a.shape(), &[1, hw.0, hw.1, 4]);
            assert_eq!(a, run());
        }
    }

    #[test]
    fn unguided_branch_option_matches_at_zero_init() {
        let m = Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let s = NoiseSchedule::default();
        let z0 = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f32 * 0.3).sin());
        let bundle = m.net.extract_guidance(&m.params, &z0, &[1], &s, &[T_EXTRACT], &mut rng_from_seed(2)).unwrap();
        let mut cfg = SamplerConfig { steps: 2, ..Default::default() };
        let a = sample(&m.net, &m.params, &s, &cfg, &[1], (8, 8), Some(HrGuidance { bundle: Some(&bundle), scale: None }), &mut rng_from_seed(1)).unwrap();
        cfg.guide_uncond = false;
        let b = sample(&m.net, &m.params, &s, &cfg, &[1], (8, 8), Some(HrGuidance { bundle: Some(&bundle), scale: None }), &mut rng_from_seed(1)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}
