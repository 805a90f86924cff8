//! Fully connected noise-prediction network with hand-written backprop.
//!
//! `input = x_t ⊕ time_embedding(t) ⊕ label_table[label]`, then two SiLU
//! hidden layers and a linear output of image size. The label table has
//! `num_classes + 1` rows; the last row is the unconditional embedding.
//! All weights live in one flat vector so that per-example gradients can be
//! clipped and noised as a whole.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{std_normal, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::ImageShape;

/// Layer sizes of a [`Denoiser`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserManifest {
    pub shape: ImageShape,
    pub time_dim: usize,
    pub label_dim: usize,
    pub num_classes: usize,
    pub hidden: [usize; 2],
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub labels: usize,
    pub total: usize,
}

impl DenoiserManifest {
    pub fn new(shape: ImageShape, time_dim: usize, label_dim: usize, num_classes: usize, hidden: [usize; 2]) -> Result<Self> {
        if time_dim == 0 || !time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time embedding dimension must be even and positive, got {time_dim}")));
        }
        if label_dim == 0 || hidden[0] == 0 || hidden[1] == 0 {
            return Err(Error::invalid("embedding and hidden sizes must be positive"));
        }
        Ok(Self { shape, time_dim, label_dim, num_classes, hidden })
    }

    pub fn data_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim() + self.time_dim + self.label_dim
    }

    /// Row index of the unconditional label embedding.
    pub fn unconditional_row(&self) -> usize {
        self.num_classes
    }

    pub fn layout(&self) -> Layout {
        let (d, din, [h1, h2]) = (self.data_dim(), self.input_dim(), self.hidden);
        let w1 = 0;
        let b1 = w1 + h1 * din;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + d * h2;
        let labels = b3 + d;
        let total = labels + (self.num_classes + 1) * self.label_dim;
        Layout { w1, b1, w2, b2, w3, b3, labels, total }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Named parameter blocks `(name, start, end)`.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let l = self.layout();
        vec![
            ("w1", l.w1, l.b1),
            ("b1", l.b1, l.w2),
            ("w2", l.w2, l.b2),
            ("b2", l.b2, l.w3),
            ("w3", l.w3, l.b3),
            ("b3", l.b3, l.labels),
            ("labels", l.labels, l.total),
        ]
    }

    fn label_row(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(self.unconditional_row()),
            Some(l) if l < self.num_classes => Ok(l),
            Some(l) => Err(Error::invalid(format!("label {l} outside [0, {})", self.num_classes))),
        }
    }
}

/// Flat parameter vector plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub manifest: DenoiserManifest,
    pub values: Vec<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn new(manifest: DenoiserManifest, values: Vec<T>) -> Result<Self> {
        if values.len() != manifest.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, manifest needs {}",
                values.len(),
                manifest.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector contains non-finite entries"));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: DenoiserManifest) -> Self {
        Self { manifest, values: vec![T::zero(); manifest.param_count()] }
    }

    /// Scaled-Gaussian initialization: weights `N(0, 1/fan_in)`, the output
    /// layer shrunk by 0.1, label embeddings `N(0, 1)`, zero biases.
    pub fn init(manifest: DenoiserManifest, seed: RngSeed) -> Self {
        let mut p = Self::zeros(manifest);
        let l = manifest.layout();
        let mut rng = seed.rng();
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut rand_chacha::ChaCha20Rng| {
            for v in &mut p.values[range] {
                *v = T::of(std) * std_normal::<T, _>(rng);
            }
        };
        fill(l.w1..l.b1, 1.0 / (manifest.input_dim() as f64).sqrt(), &mut rng);
        fill(l.w2..l.b2, 1.0 / (manifest.hidden[0] as f64).sqrt(), &mut rng);
        fill(l.w3..l.b3, 0.1 / (manifest.hidden[1] as f64).sqrt(), &mut rng);
        fill(l.labels..l.total, 1.0, &mut rng);
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn denoiser(&self) -> Denoiser<'_, T> {
        Denoiser { manifest: &self.manifest, params: &self.values }
    }
}

/// Sinusoidal embedding of the step index: `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = 10000^{−i/(dim/2)}`.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize, out: &mut [T]) {
    let half = dim / 2;
    let tf = t as f64;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of((tf * freq).sin());
        out[half + i] = T::of((tf * freq).cos());
    }
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn shape(&self) -> ImageShape;
    fn predict(&self, x_t: &[T], t: usize, label: Option<usize>) -> Result<Vec<T>>;
}

/// Borrowed view of parameters that evaluates the network.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a, T> {
    pub manifest: &'a DenoiserManifest,
    pub params: &'a [T],
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    input: Vec<T>,
    pre1: Vec<T>,
    h1: Vec<T>,
    pre2: Vec<T>,
    h2: Vec<T>,
    pub output: Vec<T>,
    label_row: usize,
}

// y = W x + b with W row-major (rows = y.len()).
#[inline]
fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], y: &mut [T]) {
    let n = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *yr = acc;
    }
}

// gw += dy ⊗ x, gb += dy, dx = Wᵀ dy (when requested).
#[inline]
fn affine_backward<T: Scalar>(w: &[T], x: &[T], dy: &[T], gw: &mut [T], gb: &mut [T], dx: Option<&mut [T]>) {
    let n = x.len();
    for (r, &d) in dy.iter().enumerate() {
        gb[r] += d;
        if d == T::zero() {
            continue;
        }
        for (g, xi) in gw[r * n..(r + 1) * n].iter_mut().zip(x) {
            *g += d * *xi;
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
        for (r, &d) in dy.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            for (o, wi) in dx.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                *o += d * *wi;
            }
        }
    }
}

impl<'a, T: Scalar> Denoiser<'a, T> {
    pub fn forward_full(&self, x_t: &[T], t: usize, label: Option<usize>) -> Result<Activations<T>> {
        let m = self.manifest;
        if x_t.len() != m.data_dim() {
            return Err(Error::invalid(format!("input has {} values, model expects {}", x_t.len(), m.data_dim())));
        }
        if self.params.len() != m.param_count() {
            return Err(Error::invalid("parameter vector does not match manifest"));
        }
        let label_row = m.label_row(label)?;
        let l = m.layout();
        let (d, [h1n, h2n]) = (m.data_dim(), m.hidden);

        let mut input = vec![T::zero(); m.input_dim()];
        input[..d].copy_from_slice(x_t);
        time_embedding(t, m.time_dim, &mut input[d..d + m.time_dim]);
        let emb = &self.params[l.labels + label_row * m.label_dim..l.labels + (label_row + 1) * m.label_dim];
        input[d + m.time_dim..].copy_from_slice(emb);

        let mut pre1 = vec![T::zero(); h1n];
        affine(&self.params[l.w1..l.b1], &self.params[l.b1..l.w2], &input, &mut pre1);
        let h1: Vec<T> = pre1.iter().map(|&a| a * sigmoid(a)).collect();
        let mut pre2 = vec![T::zero(); h2n];
        affine(&self.params[l.w2..l.b2], &self.params[l.b2..l.w3], &h1, &mut pre2);
        let h2: Vec<T> = pre2.iter().map(|&a| a * sigmoid(a)).collect();
        let mut output = vec![T::zero(); d];
        affine(&self.params[l.w3..l.b3], &self.params[l.b3..l.labels], &h2, &mut output);
        Ok(Activations { input, pre1, h1, pre2, h2, output, label_row })
    }

    pub fn forward(&self, x_t: &[T], t: usize, label: Option<usize>) -> Result<Vec<T>> {
        Ok(self.forward_full(x_t, t, label)?.output)
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, acts: &Activations<T>, d_output: &[T], grad: &mut [T]) {
        let m = self.manifest;
        let l = m.layout();
        let (d, [h1n, h2n]) = (m.data_dim(), m.hidden);
        let p = self.params;

        let mut dh2 = vec![T::zero(); h2n];
        {
            let (gw, gb) = grad[l.w3..l.labels].split_at_mut(l.b3 - l.w3);
            affine_backward(&p[l.w3..l.b3], &acts.h2, d_output, gw, gb, Some(&mut dh2));
        }
        let da2: Vec<T> = dh2.iter().zip(&acts.pre2).map(|(&g, &a)| g * silu_grad(a)).collect();
        let mut dh1 = vec![T::zero(); h1n];
        {
            let (gw, gb) = grad[l.w2..l.w3].split_at_mut(l.b2 - l.w2);
            affine_backward(&p[l.w2..l.b2], &acts.h1, &da2, gw, gb, Some(&mut dh1));
        }
        let da1: Vec<T> = dh1.iter().zip(&acts.pre1).map(|(&g, &a)| g * silu_grad(a)).collect();
        let mut d_input = vec![T::zero(); m.input_dim()];
        {
            let (gw, gb) = grad[l.w1..l.w2].split_at_mut(l.b1 - l.w1);
            affine_backward(&p[l.w1..l.b1], &acts.input, &da1, gw, gb, Some(&mut d_input));
        }
        let off = l.labels + acts.label_row * m.label_dim;
        for (g, di) in grad[off..off + m.label_dim].iter_mut().zip(&d_input[d + m.time_dim..]) {
            *g += *di;
        }
    }
}

#[inline]
fn silu_grad<T: Scalar>(a: T) -> T {
    let s = sigmoid(a);
    s * (T::one() + a * (T::one() - s))
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<'_, T> {
    fn shape(&self) -> ImageShape {
        self.manifest.shape
    }

    fn predict(&self, x_t: &[T], t: usize, label: Option<usize>) -> Result<Vec<T>> {
        self.forward(x_t, t, label)
    }
}

impl<T: Scalar> NoisePredictor<T> for DenoiserParams<T> {
    fn shape(&self) -> ImageShape {
        self.manifest.shape
    }

    fn predict(&self, x_t: &[T], t: usize, label: Option<usize>) -> Result<Vec<T>> {
        self.denoiser().forward(x_t, t, label)
    }
}

/// Uniform step in `1..=steps`.
pub(crate) fn uniform_step<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(1..=steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DenoiserManifest {
        DenoiserManifest::new(ImageShape::new(3, 2, 1).unwrap(), 4, 3, 2, [5, 4]).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let m = manifest();
        let din = 6 + 4 + 3;
        assert_eq!(m.param_count(), 5 * din + 5 + 4 * 5 + 4 + 6 * 4 + 6 + 3 * 3);
        let blocks = m.blocks();
        assert_eq!(blocks.first().unwrap().1, 0);
        assert_eq!(blocks.last().unwrap().2, m.param_count());
        assert!(blocks.windows(2).all(|w| w[0].2 == w[1].1));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = DenoiserParams::<f64>::zeros(manifest());
        let out = p.denoiser().forward(&[0.3, -1.0, 0.2, 0.0, 5.0, 1.0], 7, Some(1)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_changes_output() {
        let p = DenoiserParams::<f64>::init(manifest(), RngSeed::new(3));
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let a = p.denoiser().forward(&x, 4, None).unwrap();
        let b = p.denoiser().forward(&x, 4, Some(0)).unwrap();
        let c = p.denoiser().forward(&x, 4, Some(1)).unwrap();
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert!(p.denoiser().forward(&x, 4, Some(2)).is_err());
        assert!(p.denoiser().forward(&x[..5], 4, None).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(DenoiserParams::new(manifest(), vec![0.0f64; 3]).is_err());
        let mut v = vec![0.0f64; manifest().param_count()];
        v[0] = f64::NAN;
        assert!(DenoiserParams::new(manifest(), v).is_err());
        assert!(DenoiserManifest::new(ImageShape::new(2, 2, 1).unwrap(), 3, 2, 2, [4, 4]).is_err());
    }

    #[test]
    fn time_embedding_values() {
        let mut e = [0.0f64; 4];
        time_embedding(0, 4, &mut e);
        assert_eq!(e, [0.0, 0.0, 1.0, 1.0]);
        time_embedding(3, 4, &mut e);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
