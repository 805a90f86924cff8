//! Parametric toy glyphs for desk-scale runs.
//!
//! Each class is a fixed shape drawn in normalized coordinates, shifted by up
//! to one pixel per axis, scaled by a random stroke intensity and laid over a
//! faint uniform background.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngSeed;
use crate::tensor::{ImageShape, ImageTensor, LabeledDataset};

pub const MAX_TOY_CLASSES: usize = 10;
pub const MIN_TOY_SIDE: usize = 8;

const GLYPH_NAMES: [&str; MAX_TOY_CLASSES] = [
    "hbar", "vbar", "plus", "cross", "disk", "ring", "box", "wedge", "ell", "dots",
];

pub fn glyph_name(class: usize) -> Option<&'static str> {
    GLYPH_NAMES.get(class).copied()
}

/// Inside-test for glyph `class` at offsets `(du, dv)` from the image center,
/// both in units of the image side.
fn inside(class: usize, du: f64, dv: f64) -> bool {
    let r = du.hypot(dv);
    let box_r = du.abs().max(dv.abs());
    match class {
        0 => dv.abs() < 0.15 && du.abs() < 0.38,
        1 => du.abs() < 0.15 && dv.abs() < 0.38,
        2 => (dv.abs() < 0.1 || du.abs() < 0.1) && box_r < 0.38,
        3 => ((du - dv).abs() < 0.12 || (du + dv).abs() < 0.12) && box_r < 0.4,
        4 => r < 0.4,
        5 => (0.26..0.42).contains(&r),
        6 => (0.28..0.44).contains(&box_r),
        7 => du + dv < -0.1 && box_r < 0.42,
        8 => ((du + 0.25).abs() < 0.12 && dv.abs() < 0.38) || ((dv - 0.25).abs() < 0.12 && du.abs() < 0.38),
        9 => (du + 0.22).hypot(dv + 0.22) < 0.16 || (du - 0.22).hypot(dv - 0.22) < 0.16,
        _ => unreachable!("class checked by caller"),
    }
}

fn render(class: usize, shape: ImageShape, shift: (i64, i64), intensity: f64, rng: &mut impl Rng) -> ImageTensor<f64> {
    let mut img = ImageTensor::zeros(shape);
    let (w, h) = (shape.width as f64, shape.height as f64);
    for y in 0..shape.height {
        for x in 0..shape.width {
            let du = (x as f64 - shift.0 as f64 + 0.5) / w - 0.5;
            let dv = (y as f64 - shift.1 as f64 + 0.5) / h - 0.5;
            let on = inside(class, du, dv);
            for c in 0..shape.channels {
                let bg = rng.random_range(0.0..0.05);
                img.set(x, y, c, if on { intensity } else { bg });
            }
        }
    }
    img
}

/// `n_per_class` jittered glyphs for each of the first `classes` glyph kinds,
/// in class-major order. Deterministic in `seed`.
pub fn generate_toy_glyphs(n_per_class: usize, classes: usize, shape: ImageShape, seed: RngSeed) -> Result<LabeledDataset<f64>> {
    if classes == 0 || classes > MAX_TOY_CLASSES {
        return Err(Error::invalid(format!("toy classes must be in 1..={MAX_TOY_CLASSES}, got {classes}")));
    }
    if shape.width < MIN_TOY_SIDE || shape.height < MIN_TOY_SIDE {
        return Err(Error::invalid(format!("toy images must be at least {MIN_TOY_SIDE}x{MIN_TOY_SIDE}, got {shape}")));
    }
    let mut rng = seed.rng();
    let mut images = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for class in 0..classes {
        for _ in 0..n_per_class {
            let shift = (rng.random_range(-1..=1), rng.random_range(-1..=1));
            let intensity = rng.random_range(0.75..=1.0);
            images.push(render(class, shape, shift, intensity, &mut rng));
            labels.push(class);
        }
    }
    LabeledDataset::new(shape, images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn shape8() -> ImageShape {
        ImageShape::new(8, 8, 1).unwrap()
    }

    #[test]
    fn empty_and_deterministic() {
        let ds = generate_toy_glyphs(0, 10, shape8(), RngSeed::new(1)).unwrap();
        assert!(ds.is_empty());
        let a = generate_toy_glyphs(5, 10, shape8(), RngSeed::new(3)).unwrap();
        let b = generate_toy_glyphs(5, 10, shape8(), RngSeed::new(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_glyphs(5, 10, shape8(), RngSeed::new(4)).unwrap();
        assert_ne!(a, c);
        assert!(a.images().iter().all(|i| i.in_unit_range()));
    }

    #[test]
    fn bad_arguments() {
        assert!(generate_toy_glyphs(1, 11, shape8(), RngSeed::new(0)).is_err());
        assert!(generate_toy_glyphs(1, 0, shape8(), RngSeed::new(0)).is_err());
        assert!(generate_toy_glyphs(1, 2, ImageShape::new(7, 8, 1).unwrap(), RngSeed::new(0)).is_err());
    }

    fn design(ds: &LabeledDataset<f64>) -> DMatrix<f64> {
        let d = ds.shape().len();
        DMatrix::from_fn(ds.len(), d + 1, |i, j| if j == d { 1.0 } else { ds.image(i).data()[j] })
    }

    /// Softmax regression on raw pixels by full-batch gradient descent,
    /// scored on a fresh draw.
    fn holdout_accuracy(shape: ImageShape) -> f64 {
        let train = generate_toy_glyphs(200, 10, shape, RngSeed::new(11)).unwrap();
        let test = generate_toy_glyphs(200, 10, shape, RngSeed::new(12)).unwrap();
        let x = design(&train);
        let n = x.nrows();
        let mut w = DMatrix::<f64>::zeros(x.ncols(), 10);
        for _ in 0..2000 {
            let mut p = &x * &w;
            for (i, mut row) in p.row_iter_mut().enumerate() {
                let m = row.max();
                row.apply(|v| *v = (*v - m).exp());
                let s = row.sum();
                row /= s;
                row[train.label(i)] -= 1.0;
            }
            w -= x.transpose() * p * (2.0 / n as f64);
        }
        let scores = design(&test) * w;
        let correct = (0..test.len()).filter(|&i| scores.row(i).transpose().argmax().0 == test.label(i)).count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn linearly_separable_on_pixels() {
        let acc = holdout_accuracy(shape8());
        assert!(acc >= 0.99, "holdout accuracy {acc}");
        let acc = holdout_accuracy(ImageShape::new(12, 10, 3).unwrap());
        assert!(acc >= 0.99, "holdout accuracy {acc}");
    }
}
