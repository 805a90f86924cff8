//! Rényi divergence of the Poisson-subsampled Gaussian mechanism.
//!
//! With `p0 = N(0, σ²)` and `p1 = N(1, σ²)` the order-α cost of one release
//! is `D_α((1−q)·p0 + q·p1 ‖ p0) = ln(I)/(α−1)` where
//! `I = E_{z∼p0}[(1 − q + q·e^{(2z−1)/(2σ²)})^α]`.
//!
//! Everything is evaluated through `I − 1`, which is a sum (or integral) of
//! non-negative terms, so the tiny per-step costs of small sampling rates keep
//! full relative precision.

use std::f64::consts::PI;

use super::quadrature::integrate;
use crate::error::{Error, Result};

/// Largest integer order evaluated with the binomial closed form.
const MAX_CLOSED_FORM_ORDER: f64 = 10_000.0;
const QUAD_REL_TOL: f64 = 1e-12;
const QUAD_MAX_EVALUATIONS: usize = 4_000_000;

fn validate(q: f64, sigma: f64, alpha: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise multiplier must be finite and > 0, got {sigma}")));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("Rényi order must be finite and > 1, got {alpha}")));
    }
    Ok(())
}

/// `ln(e^a + e^b)`.
#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^x − 1)` for `x > 0`.
#[inline]
fn ln_expm1(x: f64) -> f64 {
    if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + e^l)`.
#[inline]
fn ln1p_exp(l: f64) -> f64 {
    if l > 0.0 {
        l + (-l).exp().ln_1p()
    } else {
        l.exp().ln_1p()
    }
}

/// RDP cost γ(α) of one subsampled Gaussian release with sensitivity-normalized
/// noise multiplier `sigma`. Integer orders use the binomial expansion; other
/// orders use adaptive quadrature.
pub fn sgm_rdp(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    validate(q, sigma, alpha)?;
    if (sigma * sigma).recip().is_infinite() {
        // Noise variance underflows: the release is effectively exact.
        return Ok(f64::INFINITY);
    }
    if alpha.fract() == 0.0 && alpha <= MAX_CLOSED_FORM_ORDER {
        Ok(closed_form(q, sigma, alpha as u64))
    } else {
        quadrature_form(q, sigma, alpha)
    }
}

/// Binomial-sum evaluation for integer orders.
pub fn sgm_rdp_integer(q: f64, sigma: f64, alpha: u64) -> Result<f64> {
    validate(q, sigma, alpha as f64)?;
    Ok(closed_form(q, sigma, alpha))
}

/// Quadrature evaluation, valid for every order (used directly for fractional
/// orders, and to cross-check the closed form at integer ones).
pub fn sgm_rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    validate(q, sigma, alpha)?;
    quadrature_form(q, sigma, alpha)
}

// I − 1 = Σ_{k=2}^{α} C(α,k) (1−q)^{α−k} q^k (e^{k(k−1)/(2σ²)} − 1); the k = 0, 1
// terms vanish because Σ_k C(α,k)(1−q)^{α−k}q^k = 1.
fn closed_form(q: f64, sigma: f64, alpha: u64) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let a = alpha as f64;
    let mut ln_binom = a.ln(); // ln C(α, 1)
    let mut terms = Vec::with_capacity(alpha as usize);
    for k in 2..=alpha {
        let kf = k as f64;
        ln_binom += (a - kf + 1.0).ln() - kf.ln();
        let rest = a - kf;
        let ln_rest = if rest == 0.0 { 0.0 } else { rest * ln_1mq };
        terms.push(ln_binom + ln_rest + kf * ln_q + ln_expm1(kf * (kf - 1.0) * inv_two_var));
    }
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return 0.0;
    }
    let ln_i_minus_1 = peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    ln1p_exp(ln_i_minus_1) / (a - 1.0)
}

struct Integrand {
    q: f64,
    alpha: f64,
    sigma: f64,
    inv_two_var: f64,
    ln_q: f64,
    ln_1mq: f64,
    ln_norm: f64,
}

impl Integrand {
    fn new(q: f64, sigma: f64, alpha: f64) -> Self {
        Self {
            q,
            alpha,
            sigma,
            inv_two_var: 1.0 / (2.0 * sigma * sigma),
            ln_q: q.ln(),
            ln_1mq: (-q).ln_1p(),
            ln_norm: -(sigma * (2.0 * PI).sqrt()).ln(),
        }
    }

    #[inline]
    fn ln_p0(&self, z: f64) -> f64 {
        -z * z * self.inv_two_var + self.ln_norm
    }

    #[inline]
    fn u(&self, z: f64) -> f64 {
        (2.0 * z - 1.0) * self.inv_two_var
    }

    /// ln of `p0(z)·(1 − q + q e^u)^α`.
    #[inline]
    fn ln_full(&self, z: f64) -> f64 {
        self.ln_p0(z) + self.alpha * log_add_exp(self.ln_1mq, self.ln_q + self.u(z))
    }

    /// `p0(z)·g(x)` with `x = q(e^u − 1)` and `g(x) = (1+x)^α − 1 − αx ≥ 0`.
    #[inline]
    fn excess(&self, z: f64) -> f64 {
        let ln_p0 = self.ln_p0(z);
        let x = self.q * self.u(z).exp_m1();
        let ax = self.alpha * x;
        if ax.abs() < 0.05 {
            // Generalized binomial series from the x² term on.
            let mut coeff = self.alpha * (self.alpha - 1.0) / 2.0;
            let mut power = x * x;
            let mut sum = coeff * power;
            let mut j = 2.0;
            loop {
                coeff *= (self.alpha - j) / (j + 1.0);
                power *= x;
                let term = coeff * power;
                sum += term;
                j += 1.0;
                if term.abs() <= 1e-18 * sum.abs() || j > 200.0 {
                    break;
                }
            }
            ln_p0.exp() * sum
        } else {
            let p0 = ln_p0.exp();
            (ln_p0 + self.alpha * x.ln_1p()).exp() - p0 * (1.0 + ax)
        }
    }

    /// Panel boundaries resolving the Gaussian bumps of width σ that the
    /// integrand places at z = 0, 1, …, ⌈α⌉ and α.
    fn breakpoints(&self) -> Vec<f64> {
        let s = self.sigma;
        let lo = -40.0 * s - 1.0;
        let hi = self.alpha + 40.0 * s + 1.0;
        let mut pts = vec![lo, hi];
        if s >= 0.5 {
            let step = s / 2.0;
            let n = ((hi - lo) / step).ceil() as usize;
            pts.extend((1..n).map(|i| lo + i as f64 * step));
        } else {
            let top = self.alpha.ceil() as usize;
            let centers = (0..=top).map(|k| k as f64).chain(std::iter::once(self.alpha));
            for c in centers {
                for off in [-10.0, -4.0, -1.5, 0.0, 1.5, 4.0, 10.0] {
                    pts.push(c + off * s);
                }
                pts.push(c + 0.5);
            }
            for k in 1..=12 {
                pts.push(-(k as f64) * 3.0 * s);
                pts.push(self.alpha + (k as f64) * 3.0 * s);
            }
        }
        pts.retain(|p| *p >= lo && *p <= hi);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }
}

fn quadrature_form(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    let integrand = Integrand::new(q, sigma, alpha);
    let bp = integrand.breakpoints();

    let scale = bp.iter().map(|&z| integrand.ln_full(z)).fold(f64::NEG_INFINITY, f64::max);
    let full = integrate(|z| (integrand.ln_full(z) - scale).exp(), &bp, 0.0, QUAD_REL_TOL, QUAD_MAX_EVALUATIONS)?;
    let ln_i = scale + full.value.ln();
    if ln_i > 0.5 {
        return Ok(ln_i / (alpha - 1.0));
    }

    // Small-cost regime: integrate I − 1 directly.
    let excess = integrate(|z| integrand.excess(z), &bp, 0.0, QUAD_REL_TOL, QUAD_MAX_EVALUATIONS)?;
    if excess.value < 0.0 {
        return Err(Error::NumericFailure {
            what: "negative divergence integral".into(),
            diagnostics: format!("q={q} sigma={sigma} alpha={alpha} I-1={:e}", excess.value),
        });
    }
    Ok(excess.value.ln_1p() / (alpha - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn full_sampling_is_shifted_gaussian() {
        for (sigma, alpha) in [(1.0, 2.0), (0.7, 5.0), (3.0, 32.0), (1.0, 2.5), (2.0, 7.25)] {
            let want = alpha / (2.0 * sigma * sigma);
            let got = sgm_rdp(1.0, sigma, alpha).unwrap();
            assert!(rel(got, want) < 1e-9, "sigma={sigma} alpha={alpha} got={got} want={want}");
        }
        assert!((sgm_rdp(1.0, 1.0, 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_rate_costs_nothing() {
        for sigma in [0.5, 1.0, 4.0] {
            let g = sgm_rdp(1e-12, sigma, 2.0).unwrap();
            assert!((0.0..1e-10).contains(&g), "{g}");
        }
        assert!(sgm_rdp(1e-12, 1.0, 2.5).unwrap() < 1e-10);
    }

    #[test]
    fn closed_form_agrees_with_quadrature() {
        for &q in &[1e-3, 0.01, 0.1, 0.5, 1.0] {
            for &sigma in &[0.3, 0.8, 1.5, 5.0, 30.0] {
                for &alpha in &[2u64, 3, 7, 16, 40, 64] {
                    let a = sgm_rdp_integer(q, sigma, alpha).unwrap();
                    let b = sgm_rdp_quadrature(q, sigma, alpha as f64).unwrap();
                    assert!(rel(b, a) < 1e-8, "q={q} s={sigma} a={alpha}: closed={a:e} quad={b:e}");
                }
            }
        }
    }

    #[test]
    fn second_order_small_rate_limit() {
        // γ ≈ α q² (e^{1/σ²} − 1) / 2 for q → 0.
        let (q, sigma, alpha) = (1e-6, 2.0, 3.0);
        let want = alpha * q * q * (1.0f64 / (sigma * sigma)).exp_m1() / 2.0;
        assert!(rel(sgm_rdp(q, sigma, alpha).unwrap(), want) < 1e-5);
        assert!(rel(sgm_rdp(q, sigma, 3.5).unwrap(), 3.5 * q * q * (0.25f64).exp_m1() / 2.0) < 1e-5);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(sgm_rdp(0.0, 1.0, 2.0).is_err());
        assert!(sgm_rdp(1.5, 1.0, 2.0).is_err());
        assert!(sgm_rdp(0.5, 0.0, 2.0).is_err());
        assert!(sgm_rdp(0.5, 1.0, 1.0).is_err());
        assert!(sgm_rdp(0.5, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn extreme_parameters_stay_finite() {
        for &(q, sigma, alpha) in &[(0.5, 0.01, 127.5), (1e-4, 1000.0, 1.25), (0.02, 0.05, 64.0), (0.9, 0.02, 2.5)] {
            let g = sgm_rdp(q, sigma, alpha).unwrap();
            assert!(g.is_finite() && g >= 0.0, "q={q} s={sigma} a={alpha} -> {g}");
        }
    }

    #[test]
    fn underflowing_noise_is_infinitely_expensive() {
        for alpha in [1.5, 2.0, 7.25] {
            assert_eq!(sgm_rdp(1.0, f64::MIN_POSITIVE, alpha).unwrap(), f64::INFINITY);
            assert_eq!(sgm_rdp(0.1, f64::MIN_POSITIVE, alpha).unwrap(), f64::INFINITY);
        }
    }
}
