//! Private fine-tuning: Poisson-sampled batches, flat per-example clipping,
//! Gaussian noise scaled to the expected batch size, plain SGD updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountingBackend, MechanismEvent, MechanismKind, PrivacySpec};
use crate::central_query::poisson_subsample;
use crate::diffusion::{loss_and_grad_with_draws, draw_noise, Denoiser, DenoiserManifest, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{add_gaussian, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::{clip_to_norm, l2_norm, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub lr: f64,
    /// Per-example gradient clip bound `C_f`.
    pub clip: f64,
    /// Noise multiplier `σ_f`. Zero is accepted only for non-private debugging.
    pub sigma: f64,
    /// Poisson sampling rate `q_f`.
    pub q: f64,
    /// Total optimizer steps `t_f`.
    pub steps: u64,
    /// `(t, e)` draws averaged per example inside one clipped gradient.
    #[serde(default = "one")]
    pub multiplicity: usize,
    /// Cumulative ε is evaluated every this many steps (0 = only at the end).
    #[serde(default = "default_epsilon_every")]
    pub epsilon_every: u64,
    /// Checkpoint callback interval (0 = never).
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn one() -> usize {
    1
}

fn default_epsilon_every() -> u64 {
    50
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::invalid(format!("clip bound must be > 0, got {}", self.clip)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("noise multiplier must be >= 0, got {}", self.sigma)));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {}", self.q)));
        }
        if self.multiplicity == 0 {
            return Err(Error::invalid("noise multiplicity must be at least 1"));
        }
        Ok(())
    }

    pub fn expected_batch(&self, n: usize) -> f64 {
        self.q * n as f64
    }

    pub fn event(&self) -> MechanismEvent {
        MechanismEvent {
            kind: MechanismKind::DpsgdStep,
            q: self.q,
            sigma: self.sigma.max(f64::MIN_POSITIVE),
            repetitions: 1,
            partition: None,
        }
    }
}

/// `min{1, C/‖g‖₂}·g`.
pub fn clip_gradient<T: Scalar>(g: &[T], clip: T) -> Vec<T> {
    let mut out = g.to_vec();
    clip_to_norm(&mut out, clip);
    out
}

/// Source of per-example losses and gradients over a fixed example set.
pub trait PerExampleObjective<T: Scalar>: Sync {
    fn num_examples(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Loss and gradient of example `index` at `params`; all randomness
    /// comes from `seed`.
    fn loss_and_grad(&self, params: &[T], index: usize, seed: RngSeed, multiplicity: usize) -> Result<(T, Vec<T>)>;
}

/// Denoising objective over a labeled dataset.
pub struct DiffusionObjective<'a, T> {
    pub manifest: &'a DenoiserManifest,
    pub schedule: &'a NoiseSchedule<T>,
    pub data: &'a LabeledDataset<T>,
}

impl<T: Scalar> PerExampleObjective<T> for DiffusionObjective<'_, T> {
    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn num_params(&self) -> usize {
        self.manifest.param_count()
    }

    fn loss_and_grad(&self, params: &[T], index: usize, seed: RngSeed, multiplicity: usize) -> Result<(T, Vec<T>)> {
        let net = Denoiser { manifest: self.manifest, params };
        let x0 = self.data.image(index);
        let draws = draw_noise(seed, x0.data().len(), self.schedule.steps(), multiplicity);
        loss_and_grad_with_draws(&net, x0.data(), Some(self.data.label(index)), &draws, self.schedule)
    }
}

/// Summary of one private step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 0-based index of the step just applied.
    pub step: u64,
    pub batch_size: usize,
    /// Mean loss over the realized batch (`None` for an empty batch).
    pub loss: Option<f64>,
    /// 10th, 50th and 90th percentiles of the pre-clip gradient norms.
    pub grad_norm_quantiles: Option<[f64; 3]>,
    pub event: MechanismEvent,
}

impl StepReport {
    /// One structured log line; `epsilon` is included when it was evaluated.
    pub fn log_line(&self, epsilon: Option<f64>) -> String {
        let mut s = format!("step={} batch={}", self.step + 1, self.batch_size);
        match self.loss {
            Some(l) => s.push_str(&format!(" loss={l:.6}")),
            None => s.push_str(" loss=-"),
        }
        match self.grad_norm_quantiles {
            Some([a, b, c]) => s.push_str(&format!(" gnorm_p10={a:.6} gnorm_p50={b:.6} gnorm_p90={c:.6}")),
            None => s.push_str(" gnorm_p10=- gnorm_p50=- gnorm_p90=-"),
        }
        if let Some(e) = epsilon {
            s.push_str(&format!(" eps={e:.6}"));
        }
        s
    }
}

fn quantiles(mut v: Vec<f64>) -> Option<[f64; 3]> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let at = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    Some([at(0.1), at(0.5), at(0.9)])
}

/// Seeds used by step `step`: batch sampling, per-example draws, and the
/// Gaussian perturbation. They depend only on the absolute step index, so a
/// resumed run replays the same randomness.
fn step_seeds(seed: RngSeed, step: u64) -> (RngSeed, RngSeed, RngSeed) {
    let s = seed.derive(step);
    (s.derive_named("batch"), s.derive_named("examples"), s.derive_named("noise"))
}

/// One private update of `params` in place.
pub fn dp_step<T: Scalar, O: PerExampleObjective<T> + ?Sized>(
    params: &mut [T],
    objective: &O,
    cfg: &DpSgdConfig,
    step: u64,
    seed: RngSeed,
) -> Result<StepReport> {
    cfg.validate()?;
    if params.len() != objective.num_params() {
        return Err(Error::invalid(format!("{} parameters, objective expects {}", params.len(), objective.num_params())));
    }
    let n = objective.num_examples();
    if n == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let (batch_seed, example_seed, noise_seed) = step_seeds(seed, step);
    let batch = poisson_subsample(n, cfg.q, batch_seed)?;
    let clip = T::of(cfg.clip);
    let snapshot: &[T] = params;
    let per_example: Vec<(T, f64, Vec<T>)> = batch
        .par_iter()
        .map(|&i| {
            let (loss, mut g) = objective.loss_and_grad(snapshot, i, example_seed.derive(i as u64), cfg.multiplicity)?;
            let norm = clip_to_norm(&mut g, clip).as_f64();
            debug_assert!(l2_norm(&g).as_f64() <= cfg.clip * (1.0 + 1e-9), "clipped gradient exceeds bound");
            Ok((loss, norm, g))
        })
        .collect::<Result<_>>()?;

    // Reduce in batch (= example index) order for reproducibility.
    let mut sum = vec![T::zero(); params.len()];
    let mut loss_sum = 0.0;
    let mut norms = Vec::with_capacity(per_example.len());
    for (loss, norm, g) in &per_example {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += *v;
        }
        loss_sum += loss.as_f64();
        norms.push(*norm);
    }
    let b_star = cfg.expected_batch(n);
    let inv_b = T::of(1.0 / b_star);
    for s in &mut sum {
        *s *= inv_b;
    }
    if cfg.sigma > 0.0 {
        add_gaussian(&mut noise_seed.rng(), &mut sum, T::of(cfg.sigma * cfg.clip / b_star));
    }
    let lr = T::of(cfg.lr);
    for (p, g) in params.iter_mut().zip(&sum) {
        *p -= lr * *g;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateTraining(format!("non-finite parameters after step {}", step + 1)));
    }
    Ok(StepReport {
        step,
        batch_size: batch.len(),
        loss: (!batch.is_empty()).then(|| loss_sum / batch.len() as f64),
        grad_norm_quantiles: quantiles(norms),
        event: cfg.event(),
    })
}

/// Hooks fired during [`train`]. All methods default to no-ops.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _report: &StepReport, _epsilon: Option<f64>) -> Result<()> {
        Ok(())
    }
    /// Called every `checkpoint_every` steps with the number of steps done.
    fn on_checkpoint(&mut self, _steps_done: u64, _params: &[T]) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

/// Runs steps `start_step..cfg.steps`, appending one event per step to
/// `ledger`. Cumulative ε is checked against the ledger target every
/// `epsilon_every` steps and at the end; exceeding it aborts with
/// [`Error::AccountingBug`]. A zero noise multiplier disables the check.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar, O: PerExampleObjective<T> + ?Sized>(
    params: &mut [T],
    objective: &O,
    cfg: &DpSgdConfig,
    ledger: &mut PrivacySpec,
    backend: &dyn AccountingBackend,
    seed: RngSeed,
    start_step: u64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<()> {
    cfg.validate()?;
    if start_step > cfg.steps {
        return Err(Error::invalid(format!("resume step {start_step} beyond configured {} steps", cfg.steps)));
    }
    for step in start_step..cfg.steps {
        let report = dp_step(params, objective, cfg, step, seed)?;
        ledger.record(report.event)?;
        let done = step + 1;
        let check = done == cfg.steps || (cfg.epsilon_every > 0 && done % cfg.epsilon_every == 0);
        let epsilon = match (check, cfg.sigma > 0.0) {
            (false, _) => None,
            (true, true) => Some(check_budget(ledger, backend)?),
            // Noiseless debugging run: nothing to enforce.
            (true, false) => Some(f64::INFINITY),
        };
        observer.on_step(&report, epsilon)?;
        if cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == cfg.steps) {
            observer.on_checkpoint(done, params)?;
        }
    }
    Ok(())
}

fn check_budget(ledger: &PrivacySpec, backend: &dyn AccountingBackend) -> Result<f64> {
    let eps = ledger.spent(backend)?;
    if eps > ledger.epsilon {
        return Err(Error::AccountingBug { epsilon: eps, target: ledger.epsilon });
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::{calibrate_sigma_f, RdpAccountant};

    /// `½‖θ − a_i‖²` per example; gradient `θ − a_i`.
    struct Quadratic {
        targets: Vec<Vec<f64>>,
    }

    impl PerExampleObjective<f64> for Quadratic {
        fn num_examples(&self) -> usize {
            self.targets.len()
        }
        fn num_params(&self) -> usize {
            self.targets[0].len()
        }
        fn loss_and_grad(&self, p: &[f64], i: usize, _: RngSeed, _: usize) -> Result<(f64, Vec<f64>)> {
            let g: Vec<f64> = p.iter().zip(&self.targets[i]).map(|(a, b)| a - b).collect();
            Ok((0.5 * g.iter().map(|x| x * x).sum::<f64>(), g))
        }
    }

    struct Zero(usize, usize);

    impl PerExampleObjective<f64> for Zero {
        fn num_examples(&self) -> usize {
            self.0
        }
        fn num_params(&self) -> usize {
            self.1
        }
        fn loss_and_grad(&self, _: &[f64], _: usize, _: RngSeed, _: usize) -> Result<(f64, Vec<f64>)> {
            Ok((0.0, vec![0.0; self.1]))
        }
    }

    fn cfg(lr: f64, clip: f64, sigma: f64, q: f64, steps: u64) -> DpSgdConfig {
        DpSgdConfig { lr, clip, sigma, q, steps, multiplicity: 1, epsilon_every: 0, checkpoint_every: 0 }
    }

    #[test]
    fn clipping_cases() {
        let g: Vec<f64> = vec![3.0, 4.0];
        let c = clip_gradient(&g, 2.5);
        assert!((l2_norm(&c) - 2.5).abs() < 1e-15);
        assert_eq!(clip_gradient(&g, 10.0), g);
        assert_eq!(clip_gradient(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn single_example_closed_form() {
        // θ = (1, 2, 2), a = 0: gradient (1, 2, 2) of norm 3, clipped to 1.5.
        let obj = Quadratic { targets: vec![vec![0.0; 3]] };
        let mut p = vec![1.0, 2.0, 2.0];
        dp_step(&mut p, &obj, &cfg(0.1, 1.5, 0.0, 1.0, 1), 0, RngSeed::new(1)).unwrap();
        let want: [f64; 3] = [1.0 - 0.1 * 0.5, 2.0 - 0.1 * 1.0, 2.0 - 0.1 * 1.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn noiseless_full_batch_matches_sgd() {
        let targets: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, -(i as f64) * 0.5, 1.0]).collect();
        let obj = Quadratic { targets: targets.clone() };
        let c = cfg(0.05, 2.0, 0.0, 1.0, 30);
        let mut p = vec![0.3, -0.2, 0.1];
        let mut ledger = PrivacySpec::new(1e9, 1e-5).unwrap();
        train(&mut p, &obj, &c, &mut ledger, &RdpAccountant::default(), RngSeed::new(2), 0, &mut NoObserver).unwrap();

        let mut q = vec![0.3, -0.2, 0.1];
        for _ in 0..30 {
            let mut sum = vec![0.0; 3];
            for t in &targets {
                let g: Vec<f64> = q.iter().zip(t).map(|(a, b)| a - b).collect();
                for (s, v) in sum.iter_mut().zip(clip_gradient(&g, 2.0)) {
                    *s += v;
                }
            }
            for (x, s) in q.iter_mut().zip(&sum) {
                *x -= 0.05 * (s * (1.0 / 7.0));
            }
        }
        assert_eq!(p, q);
        assert_eq!(ledger.events.len(), 30);
    }

    #[test]
    fn zero_gradient_noise_std() {
        let (n, d, steps) = (200, 6, 10_000u64);
        let c = cfg(0.5, 1.7, 1.3, 0.1, steps);
        let obj = Zero(n, d);
        let want = c.clip * c.sigma / c.expected_batch(n);
        let mut updates = vec![Vec::with_capacity(steps as usize); d];
        let mut p = vec![0.0; d];
        for s in 0..steps {
            let before = p.clone();
            dp_step(&mut p, &obj, &c, s, RngSeed::new(3)).unwrap();
            for j in 0..d {
                updates[j].push((p[j] - before[j]) / -c.lr);
            }
        }
        for u in &updates {
            let m = u.iter().sum::<f64>() / u.len() as f64;
            let sd = (u.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (u.len() - 1) as f64).sqrt();
            assert!((sd / want - 1.0).abs() < 0.02, "std {sd} vs {want}");
        }
    }

    #[test]
    fn zero_steps_no_events() {
        let obj = Zero(5, 2);
        let mut p = vec![1.0, 2.0];
        let mut ledger = PrivacySpec::new(1.0, 1e-5).unwrap();
        train(&mut p, &obj, &cfg(0.1, 1.0, 1.0, 0.5, 0), &mut ledger, &RdpAccountant::default(), RngSeed::new(0), 0, &mut NoObserver)
            .unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(ledger.events.is_empty());
    }

    #[test]
    fn resumption_is_equivalent() {
        let targets: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 5) as f64, 1.0 - (i % 3) as f64]).collect();
        let obj = Quadratic { targets };
        let acct = RdpAccountant::default();
        let full_cfg = cfg(0.1, 1.0, 0.8, 0.25, 20);
        let mut straight = vec![0.0, 0.0];
        let mut l1 = PrivacySpec::new(1e6, 1e-5).unwrap();
        train(&mut straight, &obj, &full_cfg, &mut l1, &acct, RngSeed::new(9), 0, &mut NoObserver).unwrap();

        let mut resumed = vec![0.0, 0.0];
        let mut l2 = PrivacySpec::new(1e6, 1e-5).unwrap();
        let half = DpSgdConfig { steps: 10, ..full_cfg.clone() };
        train(&mut resumed, &obj, &half, &mut l2, &acct, RngSeed::new(9), 0, &mut NoObserver).unwrap();
        train(&mut resumed, &obj, &full_cfg, &mut l2, &acct, RngSeed::new(9), 10, &mut NoObserver).unwrap();
        assert_eq!(straight, resumed);
        assert_eq!(l1.events, l2.events);
    }

    #[test]
    fn calibrated_run_stays_within_budget_and_overrun_aborts() {
        let obj = Zero(100, 3);
        let acct = RdpAccountant::default();
        let mut ledger = PrivacySpec::new(2.0, 1e-5).unwrap();
        let sigma = calibrate_sigma_f(&ledger, &acct, 50, 0.05).unwrap();
        let mut c = cfg(0.1, 1.0, sigma, 0.05, 50);
        c.epsilon_every = 10;
        struct Count(u64, u64);
        impl TrainObserver<f64> for Count {
            fn on_step(&mut self, _: &StepReport, e: Option<f64>) -> Result<()> {
                self.0 += u64::from(e.is_some());
                Ok(())
            }
            fn on_checkpoint(&mut self, _: u64, _: &[f64]) -> Result<()> {
                self.1 += 1;
                Ok(())
            }
        }
        c.checkpoint_every = 20;
        let mut seen = Count(0, 0);
        let mut p = vec![0.0; 3];
        train(&mut p, &obj, &c, &mut ledger, &acct, RngSeed::new(4), 0, &mut seen).unwrap();
        assert_eq!(ledger.step_count(), 50);
        assert_eq!((seen.0, seen.1), (5, 3));
        let eps = ledger.spent(&acct).unwrap();
        assert!((0.999 * 2.0..=2.0).contains(&eps), "{eps}");

        // Running past the calibrated horizon must trip the guard.
        let mut over = PrivacySpec::new(2.0, 1e-5).unwrap();
        let long = DpSgdConfig { steps: 200, epsilon_every: 25, ..c };
        let err = train(&mut p, &obj, &long, &mut over, &acct, RngSeed::new(4), 0, &mut NoObserver).unwrap_err();
        assert!(matches!(err, Error::AccountingBug { .. }));
    }

    #[test]
    fn log_line_format() {
        let r = StepReport {
            step: 4,
            batch_size: 3,
            loss: Some(0.5),
            grad_norm_quantiles: Some([1.0, 2.0, 3.0]),
            event: cfg(0.1, 1.0, 1.0, 0.5, 1).event(),
        };
        assert_eq!(
            r.log_line(Some(1.25)),
            "step=5 batch=3 loss=0.500000 gnorm_p10=1.000000 gnorm_p50=2.000000 gnorm_p90=3.000000 eps=1.250000"
        );
        assert_eq!(quantiles(vec![5.0, 1.0, 3.0, 2.0, 4.0]), Some([1.0, 3.0, 5.0]));
    }
}
