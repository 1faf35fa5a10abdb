//! Continuous-time variance schedule and forward corruption.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{normal_vec_f64, Rng};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// Maps `t ∈ [0, 1]` to the signal-retention coefficient ᾱ(t).
///
/// The cosine curve is normalized so ᾱ(0) = 1 and then mapped affinely onto
/// `[clip_min, 1]`. An affine floor keeps ᾱ strictly decreasing all the way
/// to `t = 1`, where a hard clamp would flatten it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub offset: f64,
    pub clip_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
            offset: 0.008,
            clip_min: 1e-5,
        }
    }
}

/// Result of [`NoiseSchedule::corrupt`]; all three tensors share one shape.
#[derive(Debug, Clone)]
pub struct CorruptionSample<T: Float> {
    pub z_t: Tensor<T>,
    pub epsilon: Tensor<T>,
    pub t: f64,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.offset > 0.0 && self.offset.is_finite(), Config, "schedule offset must be positive, got {}", self.offset);
        ensure!(
            self.clip_min > 0.0 && self.clip_min <= 1e-3,
            Config,
            "schedule clip_min must lie in (0, 1e-3], got {}",
            self.clip_min
        );
        Ok(())
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1]");
        Ok(self.alpha_bar_unchecked(t))
    }

    pub(crate) fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        let ScheduleKind::Cosine = self.kind;
        let s = self.offset;
        let f = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let normalized = f(t) / f(0.0);
        self.clip_min + (1.0 - self.clip_min) * normalized
    }

    /// `z_t = √ᾱ·z0 + √(1−ᾱ)·ε` with fresh standard-normal `ε`.
    pub fn corrupt<T: Float>(&self, z0: &Tensor<T>, t: f64, rng: &mut Rng) -> Result<CorruptionSample<T>> {
        let eps: Vec<T> = normal_vec_f64(rng, z0.numel()).into_iter().map(T::lit).collect();
        self.corrupt_with(z0, t, Tensor::new(z0.shape(), eps))
    }

    /// [`NoiseSchedule::corrupt`] with caller-supplied noise.
    pub fn corrupt_with<T: Float>(&self, z0: &Tensor<T>, t: f64, epsilon: Tensor<T>) -> Result<CorruptionSample<T>> {
        let ab = self.alpha_bar(t)?;
        ensure!(z0.all_finite(), Input, "source latent contains non-finite values");
        ensure!(
            z0.shape() == epsilon.shape(),
            Input,
            "noise shape {:?} differs from latent shape {:?}",
            epsilon.shape(),
            z0.shape()
        );
        let a = T::lit(ab.sqrt());
        let b = T::lit((1.0 - ab).sqrt());
        let z_t = z0.zip_map(&epsilon, |z, e| a * z + b * e);
        Ok(CorruptionSample { z_t, epsilon, t })
    }

    /// Corrupt each leading-axis element `i` of `z0` at its own time `ts[i]`.
    pub fn corrupt_batch<T: Float>(&self, z0: &Tensor<T>, ts: &[f64], rng: &mut Rng) -> Result<CorruptionSample<T>> {
        let eps: Vec<T> = normal_vec_f64(rng, z0.numel()).into_iter().map(T::lit).collect();
        self.corrupt_batch_with(z0, ts, Tensor::new(z0.shape(), eps))
    }

    pub fn corrupt_batch_with<T: Float>(&self, z0: &Tensor<T>, ts: &[f64], epsilon: Tensor<T>) -> Result<CorruptionSample<T>> {
        ensure!(z0.rank() >= 1 && z0.dim(0) == ts.len(), Input, "need one t per batch element");
        ensure!(z0.all_finite(), Input, "source latent contains non-finite values");
        ensure!(z0.shape() == epsilon.shape(), Input, "noise shape {:?} differs from latent shape {:?}", epsilon.shape(), z0.shape());
        let per = z0.numel() / ts.len().max(1);
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.alpha_bar(t)?;
            let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            let r = i * per..(i + 1) * per;
            out.extend(z0.data()[r.clone()].iter().zip(&epsilon.data()[r]).map(|(&z, &e)| a * z + b * e));
        }
        Ok(CorruptionSample {
            z_t: Tensor::new(z0.shape(), out),
            epsilon,
            t: ts.first().copied().unwrap_or(0.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn normalized_at_zero_and_floored_at_one() {
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar(0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.alpha_bar(1.0).unwrap() - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn midpoint_matches_closed_form() {
        // Independent evaluation of the normalized cosine curve.
        let ab = NoiseSchedule::default().alpha_bar(0.5).unwrap();
        assert!((ab - 0.493_848_652_004_733_3).abs() < 1e-12, "{ab}");
        assert!((ab - 0.4939).abs() < 1e-4);
    }

    #[test]
    fn late_step_is_cleaner() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(0.05).unwrap() > s.alpha_bar(0.5).unwrap());
    }

    #[test]
    fn out_of_range_t_is_a_domain_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.alpha_bar(1.5), Err(crate::Error::Domain(_))));
        assert!(matches!(s.alpha_bar(-0.1), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn hand_corruption_example() {
        // ᾱ = 0.25 is reached by solving for t numerically.
        let s = NoiseSchedule::default();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if s.alpha_bar(mid).unwrap() > 0.25 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let out = s
            .corrupt_with(&Tensor::scalar(2.0f64), lo, Tensor::scalar(1.0))
            .unwrap();
        assert!((out.z_t.item() - 1.866_025_403_784_438_6).abs() < 1e-9);
    }

    #[test]
    fn zero_time_is_identity_and_nonfinite_rejected() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::new(&[3], vec![0.5f32, -1.0, 2.0]);
        let out = s.corrupt(&z0, 0.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.z_t, z0);
        let bad = Tensor::new(&[1], vec![f32::NAN]);
        assert!(matches!(s.corrupt(&bad, 0.3, &mut rng_from_seed(1)), Err(crate::Error::Input(_))));
    }

    #[test]
    fn same_seed_same_sample() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::from_fn(&[4, 4, 2], |i| i as f32 * 0.1);
        let a = s.corrupt(&z0, 0.4, &mut rng_from_seed(9)).unwrap();
        let b = s.corrupt(&z0, 0.4, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.z_t, b.z_t);
        assert_eq!(a.epsilon, b.epsilon);
    }

    #[test]
    fn batch_corruption_matches_single() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f64);
        let eps = Tensor::from_fn(&[2, 3], |i| 1.0 - i as f64 * 0.3);
        let both = s.corrupt_batch_with(&z0, &[0.2, 0.7], eps.clone()).unwrap();
        for (i, t) in [0.2, 0.7].into_iter().enumerate() {
            let zi = Tensor::new(&[3], z0.data()[i * 3..i * 3 + 3].to_vec());
            let ei = Tensor::new(&[3], eps.data()[i * 3..i * 3 + 3].to_vec());
            let one = s.corrupt_with(&zi, t, ei).unwrap();
            assert_eq!(one.z_t.data(), &both.z_t.data()[i * 3..i * 3 + 3]);
        }
    }

    proptest! {
        #[test]
        fn strictly_decreasing(a in 0.0f64..1.0, d in 1e-6f64..1.0) {
            let s = NoiseSchedule::default();
            let b = (a + d).min(1.0);
            prop_assume!(b > a);
            prop_assert!(s.alpha_bar(b).unwrap() < s.alpha_bar(a).unwrap());
        }

        #[test]
        fn stays_in_range(t in 0.0f64..=1.0) {
            let s = NoiseSchedule::default();
            let ab = s.alpha_bar(t).unwrap();
            prop_assert!((s.clip_min..=1.0).contains(&ab));
        }

        #[test]
        fn reconstruction_identity(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let s = NoiseSchedule::default();
            let z0 = Tensor::from_fn(&[8], |i| (i as f64 - 3.5) * 0.7);
            let out = s.corrupt(&z0, t, &mut rng_from_seed(seed)).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for i in 0..8 {
                let rec = (out.z_t.data()[i] - (1.0 - ab).sqrt() * out.epsilon.data()[i]) / ab.sqrt();
                prop_assert!((rec - z0.data()[i]).abs() <= 1e-9 * (1.0 + z0.data()[i].abs()) / ab.sqrt());
            }
        }
    }
}
