//! Ancestral sampling: estimate `x0` from the predicted noise, re-noise it to
//! the previous step, repeat; the `x0` estimate made at `t = 1` is the sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::Result;
use crate::rng::{std_normal, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Clamp every intermediate `x0` estimate to `[0, 1]`, not only the last.
    #[serde(default)]
    pub clip_denoised: bool,
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ê) / √ᾱ_t`.
pub fn estimate_x0<T: Scalar>(x_t: &[T], predicted_noise: &[T], alpha_bar: T) -> Vec<T> {
    let (a, b) = (alpha_bar.sqrt(), (T::one() - alpha_bar).sqrt());
    x_t.iter().zip(predicted_noise).map(|(&x, &e)| (x - b * e) / a).collect()
}

/// One sample; `seed` drives `x_T` and all re-noising draws.
pub fn sample_one<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<T>,
    label: Option<usize>,
    seed: RngSeed,
    opts: SamplerOptions,
) -> Result<ImageTensor<T>> {
    let shape = model.shape();
    let mut rng = seed.rng();
    let mut x: Vec<T> = (0..shape.len()).map(|_| std_normal(&mut rng)).collect();
    let mut x0 = Vec::new();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, t, label)?;
        x0 = estimate_x0(&x, &eps, schedule.alpha_bar(t));
        if opts.clip_denoised {
            x0.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
        }
        if t > 1 {
            let ab = schedule.alpha_bar(t - 1);
            let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
            for (xi, &x0i) in x.iter_mut().zip(&x0) {
                *xi = a * x0i + b * std_normal::<T, _>(&mut rng);
            }
        }
    }
    Ok(ImageTensor::new(shape, x0)?.clamp01())
}

/// `labels.len()` samples, image `i` conditioned on `labels[i]` and seeded by
/// `seed.derive(i)`.
pub fn sample_labeled<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<T>,
    labels: &[Option<usize>],
    seed: RngSeed,
    opts: SamplerOptions,
) -> Result<Vec<ImageTensor<T>>> {
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &l)| sample_one(model, schedule, l, seed.derive(i as u64), opts))
        .collect()
}

/// `n` samples sharing one label (or the unconditional embedding).
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<T>,
    n: usize,
    label: Option<usize>,
    seed: RngSeed,
) -> Result<Vec<ImageTensor<T>>> {
    sample_labeled(model, schedule, &vec![label; n], seed, SamplerOptions::default())
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::diffusion::denoiser::{DenoiserManifest, DenoiserParams};
    use crate::tensor::ImageShape;

    struct Counting<'a> {
        inner: &'a DenoiserParams<f64>,
        calls: AtomicUsize,
    }

    impl NoisePredictor<f64> for Counting<'_> {
        fn shape(&self) -> ImageShape {
            self.inner.manifest.shape
        }
        fn predict(&self, x: &[f64], t: usize, l: Option<usize>) -> Result<Vec<f64>> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.predict(x, t, l)
        }
    }

    fn params() -> DenoiserParams<f64> {
        let m = DenoiserManifest::new(ImageShape::new(2, 2, 1).unwrap(), 4, 2, 2, [6, 6]).unwrap();
        DenoiserParams::init(m, RngSeed::new(5))
    }

    #[test]
    fn one_evaluation_per_step() {
        let p = params();
        let counter = Counting { inner: &p, calls: AtomicUsize::new(0) };
        let sched = NoiseSchedule::linear(40).unwrap();
        let out = sample(&counter, &sched, 3, Some(1), RngSeed::new(2)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(counter.calls.load(Ordering::Relaxed), 3 * 40);
        assert!(out.iter().all(|im| im.in_unit_range()));
    }

    #[test]
    fn empty_and_deterministic() {
        let p = params();
        let sched = NoiseSchedule::linear(25).unwrap();
        assert!(sample(&p, &sched, 0, None, RngSeed::new(1)).unwrap().is_empty());
        let a = sample(&p, &sched, 4, None, RngSeed::new(1)).unwrap();
        assert_eq!(a, sample(&p, &sched, 4, None, RngSeed::new(1)).unwrap());
    }

    #[test]
    fn zero_model_matches_hand_rolled_chain() {
        let p = DenoiserParams::zeros(params().manifest);
        let sched = NoiseSchedule::from_betas(vec![0.1f64, 0.2, 0.3, 0.4]).unwrap();
        let seed = RngSeed::new(77);
        let got = sample_one(&p, &sched, None, seed, SamplerOptions::default()).unwrap();

        // Same draws in the same order: x_T, then one re-noise per t = T..2.
        let mut rng = seed.rng();
        let mut x: Vec<f64> = (0..4).map(|_| std_normal(&mut rng)).collect();
        let ab = sched.alpha_bars().to_vec();
        let mut x0 = vec![];
        for t in (1..=4).rev() {
            x0 = x.iter().map(|v| v / ab[t - 1].sqrt()).collect();
            if t > 1 {
                let prev = ab[t - 2];
                x = x0.iter().map(|v| prev.sqrt() * v + (1.0 - prev).sqrt() * std_normal::<f64, _>(&mut rng)).collect();
            }
        }
        let want: Vec<f64> = x0.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(got.data(), &want[..]);
    }
}
