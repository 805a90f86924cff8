//! Augmentation bag for warm-up training on the central images.
//!
//! Every transform maps a `[0,1]` image to a `[0,1]` image of the same shape.
//! Geometric transforms resample with nearest neighbour about the image
//! center and zero-fill pixels whose source falls outside the frame.
//! Nothing here touches the sensitive data, so no privacy events are emitted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    /// Horizontal shift, magnitude in pixels (rounded).
    TranslateX,
    TranslateY,
    /// Rotation in degrees.
    Rotate,
    /// Zoom factor; > 1 enlarges.
    Scale,
    ShearX,
    ShearY,
    /// Multiplicative brightness factor.
    Brightness,
    /// Blend factor against the per-channel mean.
    Contrast,
    Invert,
    /// Side of the zeroed square as a fraction of the shorter image side.
    Cutout,
    /// Unsharp-mask amount against a 3x3 box blur.
    Sharpen,
    /// Bits kept per pixel, rounded to an integer in 1..=8.
    Posterize,
    /// Pixels at or above the threshold are inverted.
    Solarize,
}

pub const ALL_TRANSFORMS: [TransformKind; 14] = [
    TransformKind::Identity,
    TransformKind::TranslateX,
    TransformKind::TranslateY,
    TransformKind::Rotate,
    TransformKind::Scale,
    TransformKind::ShearX,
    TransformKind::ShearY,
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::Invert,
    TransformKind::Cutout,
    TransformKind::Sharpen,
    TransformKind::Posterize,
    TransformKind::Solarize,
];

impl TransformKind {
    /// Default magnitude range `(lo, hi)`.
    pub fn default_range(self) -> (f64, f64) {
        use TransformKind::*;
        match self {
            Identity | Invert => (0.0, 0.0),
            TranslateX | TranslateY => (-2.0, 2.0),
            Rotate => (-20.0, 20.0),
            Scale => (0.85, 1.15),
            ShearX | ShearY => (-0.25, 0.25),
            Brightness => (0.7, 1.3),
            Contrast => (0.7, 1.3),
            Cutout => (0.15, 0.35),
            Sharpen => (0.0, 1.0),
            Posterize => (3.0, 6.0),
            Solarize => (0.7, 1.0),
        }
    }

    fn check_range(self, lo: f64, hi: f64) -> Result<()> {
        use TransformKind::*;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("{self:?}: bad magnitude range [{lo}, {hi}]")));
        }
        let ok = match self {
            Scale => lo > 0.0,
            Brightness | Contrast | Sharpen => lo >= 0.0,
            Cutout => lo >= 0.0 && hi <= 1.0,
            Posterize => lo >= 1.0 && hi <= 8.0,
            Solarize => lo >= 0.0 && hi <= 1.0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{self:?}: magnitude range [{lo}, {hi}] outside the transform's domain")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub min: f64,
    pub max: f64,
}

impl TransformSpec {
    pub fn with_default_range(kind: TransformKind) -> Self {
        let (min, max) = kind.default_range();
        Self { kind, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationBag {
    pub transforms: Vec<TransformSpec>,
    /// Transforms sampled per application.
    pub k: usize,
}

impl Default for AugmentationBag {
    fn default() -> Self {
        Self { transforms: ALL_TRANSFORMS.iter().map(|&t| TransformSpec::with_default_range(t)).collect(), k: 2 }
    }
}

impl AugmentationBag {
    pub fn new(transforms: Vec<TransformSpec>, k: usize) -> Result<Self> {
        let bag = Self { transforms, k };
        bag.validate()?;
        Ok(bag)
    }

    pub fn identity() -> Self {
        Self { transforms: vec![TransformSpec::with_default_range(TransformKind::Identity)], k: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transforms.is_empty() {
            return Err(Error::invalid("augmentation bag is empty"));
        }
        for t in &self.transforms {
            t.kind.check_range(t.min, t.max)?;
        }
        Ok(())
    }
}

/// Samples `bag.k` transforms with replacement and applies them in order.
pub fn apply_random_chain<T: Scalar, R: Rng + ?Sized>(x: &ImageTensor<T>, bag: &AugmentationBag, rng: &mut R) -> ImageTensor<T> {
    let mut img: ImageTensor<f64> = x.cast();
    for _ in 0..bag.k {
        let spec = bag.transforms[rng.random_range(0..bag.transforms.len())];
        let m = if spec.max > spec.min { rng.random_range(spec.min..=spec.max) } else { spec.min };
        img = apply_transform(&img, spec.kind, m, rng);
    }
    img.clamp01().cast()
}

/// Applies one transform at magnitude `m`. `rng` is only consulted by
/// cutout, for the square's position.
pub fn apply_transform<R: Rng + ?Sized>(x: &ImageTensor<f64>, kind: TransformKind, m: f64, rng: &mut R) -> ImageTensor<f64> {
    use TransformKind::*;
    let out = match kind {
        Identity => x.clone(),
        TranslateX => resample(x, |u, v| (u - m.round(), v)),
        TranslateY => resample(x, |u, v| (u, v - m.round())),
        Rotate => {
            let (s, c) = m.to_radians().sin_cos();
            resample(x, |u, v| (c * u + s * v, -s * u + c * v))
        }
        Scale => resample(x, |u, v| (u / m, v / m)),
        ShearX => resample(x, |u, v| (u - m * v, v)),
        ShearY => resample(x, |u, v| (u, v - m * u)),
        Brightness => x.map(|p| p * m),
        Contrast => contrast(x, m),
        Invert => x.map(|p| 1.0 - p),
        Cutout => cutout(x, m, rng),
        Sharpen => sharpen(x, m),
        Posterize => {
            let levels = 2f64.powi(m.round().clamp(1.0, 8.0) as i32) - 1.0;
            x.map(|p| (p.clamp(0.0, 1.0) * levels).round() / levels)
        }
        Solarize => x.map(|p| if p >= m { 1.0 - p } else { p }),
    };
    out.clamp01()
}

/// Inverse-maps each output pixel through `src`, which takes and returns
/// coordinates relative to the image center.
fn resample(x: &ImageTensor<f64>, src: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor<f64> {
    let s = x.shape();
    let (cx, cy) = ((s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0);
    let mut out = ImageTensor::zeros(s);
    for y in 0..s.height {
        for xo in 0..s.width {
            let (u, v) = src(xo as f64 - cx, y as f64 - cy);
            let (sx, sy) = ((u + cx).round(), (v + cy).round());
            if sx < 0.0 || sy < 0.0 || sx >= s.width as f64 || sy >= s.height as f64 {
                continue;
            }
            for c in 0..s.channels {
                out.set(xo, y, c, x.get(sx as usize, sy as usize, c));
            }
        }
    }
    out
}

fn contrast(x: &ImageTensor<f64>, m: f64) -> ImageTensor<f64> {
    let s = x.shape();
    let mut out = x.clone();
    for c in 0..s.channels {
        let mean = x.data().iter().skip(c).step_by(s.channels).sum::<f64>() / (s.width * s.height) as f64;
        for p in out.data_mut().iter_mut().skip(c).step_by(s.channels) {
            *p = mean + m * (*p - mean);
        }
    }
    out
}

fn cutout<R: Rng + ?Sized>(x: &ImageTensor<f64>, m: f64, rng: &mut R) -> ImageTensor<f64> {
    let s = x.shape();
    let side = (m * s.width.min(s.height) as f64).round() as usize;
    let mut out = x.clone();
    if side == 0 {
        return out;
    }
    let x0 = rng.random_range(0..=s.width - side.min(s.width));
    let y0 = rng.random_range(0..=s.height - side.min(s.height));
    for y in y0..(y0 + side).min(s.height) {
        for xx in x0..(x0 + side).min(s.width) {
            for c in 0..s.channels {
                out.set(xx, y, c, 0.0);
            }
        }
    }
    out
}

fn sharpen(x: &ImageTensor<f64>, m: f64) -> ImageTensor<f64> {
    let s = x.shape();
    let mut out = x.clone();
    for y in 0..s.height {
        for xx in 0..s.width {
            for c in 0..s.channels {
                let (mut sum, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..=(y + 1).min(s.height - 1) {
                    for xs in xx.saturating_sub(1)..=(xx + 1).min(s.width - 1) {
                        sum += x.get(xs, yy, c);
                        n += 1.0;
                    }
                }
                let p = x.get(xx, y, c);
                out.set(xx, y, c, p + m * (p - sum / n));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use crate::tensor::ImageShape;
    use proptest::prelude::*;

    fn random_image(shape: ImageShape, seed: u64) -> ImageTensor<f64> {
        let mut rng = RngSeed::new(seed).rng();
        let data = (0..shape.len()).map(|_| rng.random_range(0.0..=1.0)).collect();
        ImageTensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_bag_is_noop() {
        let x = random_image(ImageShape::new(5, 4, 3).unwrap(), 1);
        let mut rng = RngSeed::new(2).rng();
        for k in [0, 1, 2, 7] {
            let bag = AugmentationBag { k, ..AugmentationBag::identity() };
            assert_eq!(apply_random_chain(&x, &bag, &mut rng), x);
        }
    }

    #[test]
    fn translate_round_trip_zero_fills_border() {
        let s = ImageShape::new(7, 5, 2).unwrap();
        let x = random_image(s, 3);
        let mut rng = RngSeed::new(0).rng();
        let fwd = apply_transform(&x, TransformKind::TranslateX, 2.0, &mut rng);
        for y in 0..5 {
            for c in 0..2 {
                for xx in 0..7 {
                    let want = if xx >= 2 { x.get(xx - 2, y, c) } else { 0.0 };
                    assert_eq!(fwd.get(xx, y, c), want);
                }
            }
        }
        let back = apply_transform(&fwd, TransformKind::TranslateX, -2.0, &mut rng);
        for y in 0..5 {
            for c in 0..2 {
                for xx in 0..7 {
                    let want = if xx < 5 { x.get(xx, y, c) } else { 0.0 };
                    assert_eq!(back.get(xx, y, c), want);
                }
            }
        }
    }

    #[test]
    fn rotate_quarter_turn_on_square() {
        let s = ImageShape::new(3, 3, 1).unwrap();
        let x = ImageTensor::new(s, (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        let mut rng = RngSeed::new(0).rng();
        let r = apply_transform(&x, TransformKind::Rotate, 90.0, &mut rng);
        let r4 = (0..3).fold(r.clone(), |acc, _| apply_transform(&acc, TransformKind::Rotate, 90.0, &mut rng));
        assert_eq!(r4, x);
        assert_ne!(r, x);
        assert_eq!(r.get(1, 1, 0), x.get(1, 1, 0));
    }

    #[test]
    fn pointwise_transforms() {
        let s = ImageShape::new(2, 1, 1).unwrap();
        let x = ImageTensor::new(s, vec![0.2, 0.9]).unwrap();
        let mut rng = RngSeed::new(0).rng();
        let t = |k, m, rng: &mut _| apply_transform(&x, k, m, rng).into_data();
        assert_eq!(t(TransformKind::Invert, 0.0, &mut rng), vec![0.8, 1.0 - 0.9]);
        assert_eq!(t(TransformKind::Solarize, 0.5, &mut rng), vec![0.2, 1.0 - 0.9]);
        assert_eq!(t(TransformKind::Brightness, 2.0, &mut rng), vec![0.4, 1.0]);
        assert_eq!(t(TransformKind::Posterize, 1.0, &mut rng), vec![0.0, 1.0]);
        let c = t(TransformKind::Contrast, 0.0, &mut rng);
        assert!((c[0] - 0.55).abs() < 1e-15 && (c[1] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn chains_preserve_range_and_shape() {
        let s = ImageShape::new(8, 8, 3).unwrap();
        let x = random_image(s, 9);
        let bag = AugmentationBag::default();
        let mut rng = RngSeed::new(10).rng();
        for _ in 0..1000 {
            let y = apply_random_chain(&x, &bag, &mut rng);
            assert_eq!(y.shape(), s);
            assert!(y.in_unit_range());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let x = random_image(ImageShape::new(6, 6, 1).unwrap(), 4);
        let bag = AugmentationBag::default();
        let run = || {
            let mut rng = RngSeed::new(77).rng();
            (0..20).map(|_| apply_random_chain(&x, &bag, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation() {
        assert!(AugmentationBag::new(vec![], 2).is_err());
        let bad = TransformSpec { kind: TransformKind::Scale, min: 0.0, max: 1.0 };
        assert!(AugmentationBag::new(vec![bad], 2).is_err());
        let flipped = TransformSpec { kind: TransformKind::Rotate, min: 5.0, max: -5.0 };
        assert!(AugmentationBag::new(vec![flipped], 2).is_err());
        assert!(AugmentationBag::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn every_transform_preserves_range(
            w in 1usize..7, h in 1usize..7, c in prop::sample::select(vec![1usize, 3]),
            which in 0usize..14, t in 0.0f64..=1.0, seed in any::<u64>(),
        ) {
            let s = ImageShape::new(w, h, c).unwrap();
            let x = random_image(s, seed);
            let kind = ALL_TRANSFORMS[which];
            let (lo, hi) = kind.default_range();
            let mut rng = RngSeed::new(seed).rng();
            let y = apply_transform(&x, kind, lo + t * (hi - lo), &mut rng);
            prop_assert_eq!(y.shape(), s);
            prop_assert!(y.in_unit_range());
        }
    }
}
