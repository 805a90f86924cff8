//! Image tensors and labeled datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width × height × channels, row-major with channels last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!("image shape {width}x{height}x{channels} has a zero dimension")));
        }
        Ok(Self { width, height, channels })
    }

    /// Number of scalar values, `W·H·C`.
    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(shape: ImageShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "image data has {} values, shape {shape} needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: ImageShape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.shape.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.shape.index(x, y, c);
        self.data[i] = v;
    }

    /// Euclidean norm of the flattened pixel vector.
    pub fn l2_norm(&self) -> T {
        l2_norm(&self.data)
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor { shape: self.shape, data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }
}

/// Euclidean norm of a flat vector. Accumulates in `f64` with scaling so
/// large or tiny entries neither overflow nor underflow.
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
    if scale == 0.0 || !scale.is_finite() {
        return T::of(scale);
    }
    let ss: f64 = v.iter().map(|x| (x.as_f64() / scale).powi(2)).sum();
    T::of(scale * ss.sqrt())
}

/// `min{1, bound/‖v‖₂}·v` in place. The zero vector is left unchanged.
/// Returns the pre-clip norm.
pub fn clip_to_norm<T: Scalar>(v: &mut [T], bound: T) -> T {
    let norm = l2_norm(v);
    if norm > bound {
        let factor = bound / norm;
        for x in v.iter_mut() {
            *x *= factor;
        }
    }
    norm
}

/// Ordered `(image, label)` pairs sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    shape: ImageShape,
    images: Vec<ImageTensor<T>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(shape: ImageShape, images: Vec<ImageTensor<T>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.shape() != shape) {
            return Err(Error::invalid(format!("image {i} has shape {}, dataset shape is {shape}", img.shape())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} of example {i} is outside [0, {num_classes})")));
        }
        Ok(Self { shape, images, labels, num_classes })
    }

    pub fn empty(shape: ImageShape, num_classes: usize) -> Result<Self> {
        Self::new(shape, Vec::new(), Vec::new(), num_classes)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[ImageTensor<T>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &ImageTensor<T> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset holding the given examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            shape: self.shape,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of each label's examples, indexed by label. These subsets are
    /// disjoint and cover the dataset.
    pub fn partition_by_label(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            parts[l].push(i);
        }
        parts
    }

    /// Same examples with every label replaced (used for chance-level probes).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.shape, self.images.clone(), labels, self.num_classes)
    }

    pub fn push(&mut self, image: ImageTensor<T>, label: usize) -> Result<()> {
        if image.shape() != self.shape {
            return Err(Error::invalid(format!("image shape {} != dataset shape {}", image.shape(), self.shape)));
        }
        if label >= self.num_classes {
            return Err(Error::invalid(format!("label {label} outside [0, {})", self.num_classes)));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }
}
