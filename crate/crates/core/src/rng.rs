//! Deterministic, splittable randomness.
//!
//! Every stochastic operation takes an [`RngSeed`]. A seed names one ChaCha20
//! keystream (`seed` is the key, `stream` the stream id), so identical seeds
//! give identical draws on every platform. Child seeds are derived by hashing
//! a tag into the stream id, which keeps e.g. per-example noise independent of
//! the order in which a batch is processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngSeed {
    pub const fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub const fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child seed for `tag`. Distinct tags give (with overwhelming
    /// probability) distinct, independent streams.
    pub fn derive(self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Child seed for a named purpose.
    pub fn derive_named(self, name: &str) -> Self {
        let tag = name
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3));
        self.derive(tag)
    }

    pub fn rng(self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Standard normal draw converted to `T`.
#[inline]
pub fn std_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

/// Adds `N(0, std²)` noise to every element of `out`.
pub fn add_gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, out: &mut [T], std: T) {
    if std == T::zero() {
        return;
    }
    for v in out.iter_mut() {
        *v += std * std_normal::<T, _>(rng);
    }
}

/// `len` i.i.d. samples from `N(0, std²)`. `std = 0` yields zeros without
/// consuming randomness.
pub fn gaussian_noise<T: Scalar>(len: usize, std: T, seed: RngSeed) -> Result<Vec<T>> {
    if !(std >= T::zero()) || !std.is_finite() {
        return Err(Error::invalid(format!("noise std must be finite and >= 0, got {std}")));
    }
    let mut out = vec![T::zero(); len];
    add_gaussian(&mut seed.rng(), &mut out, std);
    Ok(out)
}
