use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest ᾱ_T accepted by [`NoiseSchedule::linear`].
pub const TERMINAL_ALPHA_BAR_MAX: f64 = 1e-3;

/// Forward-process noise schedule. Steps are 1-based: `beta(t)` and
/// `alpha_bar(t)` take `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Schedule from explicit β values, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b >= T::zero() && **b < T::one())) {
            return Err(Error::invalid(format!("beta_{} = {b} is outside [0, 1)", i + 1)));
        }
        let mut acc = 1.0f64;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b.as_f64();
                T::of(acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Linear β schedule over `steps` steps. The endpoints 1e-4 and 0.02 are
    /// the usual 1000-step values, rescaled by `1000/steps` so that short
    /// schedules still end near pure noise.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("linear schedule needs at least 2 steps"));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas: Vec<T> = (0..steps).map(|i| T::of(lo + (hi - lo) * i as f64 / (steps - 1) as f64)).collect();
        let s = Self::from_betas(betas)?;
        if s.alpha_bar(steps).as_f64() >= TERMINAL_ALPHA_BAR_MAX {
            return Err(Error::invalid(format!(
                "{steps}-step linear schedule ends at alpha_bar {} (needs < {TERMINAL_ALPHA_BAR_MAX})",
                s.alpha_bar(steps)
            )));
        }
        Ok(s)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_products() {
        let s = NoiseSchedule::from_betas(vec![0.5f64, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert!(NoiseSchedule::from_betas(vec![0.1f64, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![-0.1f64]).is_err());
        assert!(NoiseSchedule::<f64>::from_betas(vec![]).is_err());
    }

    #[test]
    fn linear_default_is_monotone_and_terminal() {
        for steps in [50, 100, 1000] {
            let s = NoiseSchedule::<f64>::linear(steps).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(steps) < TERMINAL_ALPHA_BAR_MAX);
            assert!(s.betas().iter().all(|&b| (0.0..1.0).contains(&b)));
        }
        let s32 = NoiseSchedule::<f32>::linear(100).unwrap();
        assert_eq!(s32.steps(), 100);
    }

    #[test]
    fn step_bounds() {
        let s = NoiseSchedule::from_betas(vec![0.1f64; 10]).unwrap();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(11).is_err());
        assert!(s.check_step(10).is_ok());
    }
}
