//! Forward corruption and the noise-prediction objective.

use rayon::prelude::*;

use super::denoiser::{uniform_step, Denoiser, DenoiserParams};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{std_normal, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·e` for a given noise draw `e`.
pub fn corrupt<T: Scalar>(x0: &[T], noise: &[T], t: usize, schedule: &NoiseSchedule<T>) -> Result<Vec<T>> {
    schedule.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(Error::invalid("image and noise lengths differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &e)| a * x + b * e).collect())
}

/// Samples `e ~ N(0, I)` and returns `(x_t, e)`.
pub fn forward_noise<T: Scalar>(
    x0: &ImageTensor<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
    seed: RngSeed,
) -> Result<(ImageTensor<T>, Vec<T>)> {
    schedule.check_step(t)?;
    let mut rng = seed.rng();
    let e: Vec<T> = (0..x0.data().len()).map(|_| std_normal(&mut rng)).collect();
    let xt = corrupt(x0.data(), &e, t, schedule)?;
    Ok((ImageTensor::new(x0.shape(), xt)?, e))
}

/// One training example for the denoising loss.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    pub image: &'a ImageTensor<T>,
    pub label: Option<usize>,
    /// Seed of this example's `(t, e)` draws.
    pub seed: RngSeed,
}

/// Loss and gradient of one example with explicit `(t, e)` draws:
/// `(1/K) Σ_k ‖e_k − e_θ(x_{t_k}, t_k)‖²`.
pub fn loss_and_grad_with_draws<T: Scalar>(
    net: &Denoiser<'_, T>,
    x0: &[T],
    label: Option<usize>,
    draws: &[(usize, Vec<T>)],
    schedule: &NoiseSchedule<T>,
) -> Result<(T, Vec<T>)> {
    if draws.is_empty() {
        return Err(Error::invalid("noise multiplicity must be at least 1"));
    }
    let k = T::of(draws.len() as f64);
    let mut grad = vec![T::zero(); net.params.len()];
    let mut loss = T::zero();
    let two = T::of(2.0);
    for (t, e) in draws {
        let xt = corrupt(x0, e, *t, schedule)?;
        let acts = net.forward_full(&xt, *t, label)?;
        let mut d_out = Vec::with_capacity(e.len());
        for (&o, &ei) in acts.output.iter().zip(e) {
            let r = o - ei;
            loss += r * r;
            d_out.push(two * r / k);
        }
        net.backward(&acts, &d_out, &mut grad);
    }
    Ok((loss / k, grad))
}

/// Draws the `K` `(t, e)` pairs of one example.
pub fn draw_noise<T: Scalar>(seed: RngSeed, dim: usize, steps: usize, multiplicity: usize) -> Vec<(usize, Vec<T>)> {
    let mut rng = seed.rng();
    (0..multiplicity)
        .map(|_| {
            let t = uniform_step(&mut rng, steps);
            let e = (0..dim).map(|_| std_normal(&mut rng)).collect();
            (t, e)
        })
        .collect()
}

/// Loss and hand-derived gradient of one example, averaged over `K` noise
/// draws.
pub fn example_loss_and_grad<T: Scalar>(
    params: &DenoiserParams<T>,
    example: &Example<'_, T>,
    schedule: &NoiseSchedule<T>,
    multiplicity: usize,
) -> Result<(T, Vec<T>)> {
    if multiplicity == 0 {
        return Err(Error::invalid("noise multiplicity must be at least 1"));
    }
    let draws = draw_noise(example.seed, example.image.data().len(), schedule.steps(), multiplicity);
    loss_and_grad_with_draws(&params.denoiser(), example.image.data(), example.label, &draws, schedule)
}

/// Mean loss over a batch with one gradient per example.
#[derive(Debug, Clone)]
pub struct DiffusionBatchLoss<T> {
    pub loss: T,
    pub example_losses: Vec<T>,
    pub grads: Vec<Vec<T>>,
}

/// Per-example losses and gradients, computed in parallel and returned in
/// batch order.
pub fn loss_and_per_example_grads<T: Scalar>(
    params: &DenoiserParams<T>,
    batch: &[Example<'_, T>],
    schedule: &NoiseSchedule<T>,
    multiplicity: usize,
) -> Result<DiffusionBatchLoss<T>> {
    let results: Vec<(T, Vec<T>)> = batch
        .par_iter()
        .map(|ex| example_loss_and_grad(params, ex, schedule, multiplicity))
        .collect::<Result<_>>()?;
    let (example_losses, grads): (Vec<T>, Vec<Vec<T>>) = results.into_iter().unzip();
    let loss = if batch.is_empty() {
        T::zero()
    } else {
        example_losses.iter().copied().sum::<T>() / T::of(batch.len() as f64)
    };
    Ok(DiffusionBatchLoss { loss, example_losses, grads })
}

/// Gradient of the mean batch loss accumulated in a single buffer
/// (no per-example materialization).
pub fn batch_gradient<T: Scalar>(
    params: &DenoiserParams<T>,
    batch: &[Example<'_, T>],
    schedule: &NoiseSchedule<T>,
    multiplicity: usize,
) -> Result<(T, Vec<T>)> {
    let net = params.denoiser();
    let mut grad = vec![T::zero(); params.len()];
    let mut loss = T::zero();
    let scale = T::one() / T::of((batch.len() * multiplicity) as f64);
    let two = T::of(2.0);
    for ex in batch {
        let draws = draw_noise::<T>(ex.seed, ex.image.data().len(), schedule.steps(), multiplicity);
        for (t, e) in &draws {
            let xt = corrupt(ex.image.data(), e, *t, schedule)?;
            let acts = net.forward_full(&xt, *t, ex.label)?;
            let d_out: Vec<T> = acts
                .output
                .iter()
                .zip(e)
                .map(|(&o, &ei)| {
                    loss += (o - ei) * (o - ei) * scale;
                    two * (o - ei) * scale
                })
                .collect();
            net.backward(&acts, &d_out, &mut grad);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserManifest;
    use crate::tensor::ImageShape;

    #[test]
    fn corruption_examples() {
        let s = NoiseSchedule::from_betas(vec![0.5f64, 0.5]).unwrap();
        let x = corrupt(&[0.0, 0.0], &[1.0, 1.0], 2, &s).unwrap();
        assert!((x[0] - 0.75f64.sqrt()).abs() < 1e-15);
        let clean = NoiseSchedule::from_betas(vec![0.0f64, 0.0, 0.3]).unwrap();
        assert_eq!(corrupt(&[0.3, 0.7], &[5.0, -2.0], 2, &clean).unwrap(), vec![0.3, 0.7]);
        assert!(corrupt(&[0.0], &[0.0], 3, &s).is_err());
        assert!(corrupt(&[0.0], &[0.0], 0, &s).is_err());
    }

    #[test]
    fn per_example_grads_sum_to_batch_gradient() {
        let shape = ImageShape::new(3, 3, 1).unwrap();
        let m = DenoiserManifest::new(shape, 4, 3, 3, [8, 6]).unwrap();
        let p = DenoiserParams::<f64>::init(m, RngSeed::new(11));
        let sched = NoiseSchedule::linear(30).unwrap();
        let imgs: Vec<ImageTensor<f64>> = (0..5)
            .map(|i| ImageTensor::new(shape, (0..9).map(|j| ((i * 9 + j) % 7) as f64 / 7.0).collect()).unwrap())
            .collect();
        let batch: Vec<Example<'_, f64>> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| Example { image: im, label: if i == 4 { None } else { Some(i % 3) }, seed: RngSeed::new(1).derive(i as u64) })
            .collect();
        let per = loss_and_per_example_grads(&p, &batch, &sched, 2).unwrap();
        let (loss, grad) = batch_gradient(&p, &batch, &sched, 2).unwrap();
        assert_eq!(per.grads.len(), 5);
        assert!((per.loss - loss).abs() <= 1e-12 * loss);
        let n = batch.len() as f64;
        let mut max_rel = 0.0f64;
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (j, g) in grad.iter().enumerate() {
            let s: f64 = per.grads.iter().map(|pg| pg[j]).sum::<f64>() / n;
            max_rel = max_rel.max((s - g).abs() / scale);
        }
        assert!(max_rel < 1e-12, "{max_rel}");
    }
}
