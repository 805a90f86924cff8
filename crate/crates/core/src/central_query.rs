//! Noisy central images: per-pixel means and per-pixel histogram modes of
//! Poisson samples of the sensitive data.
//!
//! Mean query: clip every sampled image to L2 norm `C_c`, sum, divide by the
//! expected batch `B*_c = q_c·N`, add `N(0, (σ_c·C_c/B*_c)²)` per pixel. Adding or
//! removing one image moves the pre-noise mean by at most `C_c/B*_c`.
//!
//! Mode query: count every pixel of every sampled image into `bins` equal-width
//! bins over `[0, p_max]`, add `N(0, W·H·C·σ_c²)` to every count, and emit the
//! midpoint of each pixel's noisy argmax bin. One image adds one count per
//! pixel, so the histogram moves by exactly `√(W·H·C)` in L2.
//!
//! Both are subsampled Gaussian mechanisms with noise multiplier `σ_c`; each
//! released image is charged as one [`MechanismEvent`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{MechanismEvent, MechanismKind};
use crate::error::{Error, Result};
use crate::rng::{add_gaussian, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::{clip_to_norm, ImageShape, ImageTensor, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanQueryConfig {
    pub n_c: usize,
    pub q_c: f64,
    pub sigma_c: f64,
    /// Image norm bound `C_c`.
    pub clip_norm: f64,
}

impl MeanQueryConfig {
    pub fn validate(&self, n_s: usize) -> Result<()> {
        check_common(self.n_c, self.q_c, self.sigma_c, n_s)?;
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::invalid(format!("image norm bound must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Gray-image defaults: batch 6000 of 55000, `σ_c = 5`, `C_c = 28`.
    pub fn gray_default() -> Self {
        Self { n_c: 50, q_c: 6000.0 / 55000.0, sigma_c: 5.0, clip_norm: 28.0 }
    }

    /// Color-image defaults: batch 12000, `σ_c = 10`, `C_c = 55.5`.
    pub fn color_default(n_s: usize) -> Self {
        Self { n_c: 500, q_c: (12000.0 / n_s as f64).min(1.0), sigma_c: 10.0, clip_norm: 55.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeQueryConfig {
    pub n_c: usize,
    pub q_c: f64,
    pub sigma_c: f64,
    pub bins: usize,
    pub p_max: f64,
}

impl ModeQueryConfig {
    pub fn validate(&self, n_s: usize) -> Result<()> {
        check_common(self.n_c, self.q_c, self.sigma_c, n_s)?;
        if self.bins < 2 {
            return Err(Error::invalid(format!("histogram needs at least 2 bins, got {}", self.bins)));
        }
        if !(self.p_max > 0.0) || !self.p_max.is_finite() {
            return Err(Error::invalid(format!("p_max must be > 0, got {}", self.p_max)));
        }
        Ok(())
    }

    pub fn gray_default() -> Self {
        Self { n_c: 50, q_c: 6000.0 / 55000.0, sigma_c: 5.0, bins: 2, p_max: 1.0 }
    }

    pub fn color_default(n_s: usize) -> Self {
        Self { n_c: 500, q_c: (12000.0 / n_s as f64).min(1.0), sigma_c: 10.0, bins: 16, p_max: 1.0 }
    }
}

fn check_common(n_c: usize, q_c: f64, sigma_c: f64, n_s: usize) -> Result<()> {
    if n_c == 0 {
        return Err(Error::invalid("number of central images must be positive"));
    }
    if !(q_c > 0.0 && q_c <= 1.0) {
        return Err(Error::invalid(format!("q_c must be in (0, 1], got {q_c}")));
    }
    if !(sigma_c >= 0.0) || !sigma_c.is_finite() {
        return Err(Error::invalid(format!("sigma_c must be >= 0, got {sigma_c}")));
    }
    if q_c * (n_s as f64) < 1.0 {
        return Err(Error::invalid(format!("expected batch q_c*N = {} is below 1", q_c * n_s as f64)));
    }
    Ok(())
}

/// Which central statistic to query, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CentralQuery {
    Mean(MeanQueryConfig),
    Mode(ModeQueryConfig),
}

impl CentralQuery {
    pub fn n_c(&self) -> usize {
        match self {
            CentralQuery::Mean(c) => c.n_c,
            CentralQuery::Mode(c) => c.n_c,
        }
    }

    pub fn q_c(&self) -> f64 {
        match self {
            CentralQuery::Mean(c) => c.q_c,
            CentralQuery::Mode(c) => c.q_c,
        }
    }

    pub fn sigma_c(&self) -> f64 {
        match self {
            CentralQuery::Mean(c) => c.sigma_c,
            CentralQuery::Mode(c) => c.sigma_c,
        }
    }

    pub fn kind(&self) -> MechanismKind {
        match self {
            CentralQuery::Mean(_) => MechanismKind::MeanQuery,
            CentralQuery::Mode(_) => MechanismKind::ModeQuery,
        }
    }

    fn with_n_c(self, n_c: usize) -> Self {
        match self {
            CentralQuery::Mean(c) => CentralQuery::Mean(MeanQueryConfig { n_c, ..c }),
            CentralQuery::Mode(c) => CentralQuery::Mode(ModeQueryConfig { n_c, ..c }),
        }
    }
}

/// Record of how a central set was produced; `events` is exactly what was
/// charged to the accountant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralProvenance {
    pub query: CentralQuery,
    pub per_label: bool,
    pub events: Vec<MechanismEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralImageSet<T> {
    pub shape: ImageShape,
    pub images: Vec<ImageTensor<T>>,
    pub labels: Vec<Option<usize>>,
    pub provenance: CentralProvenance,
}

impl<T: Scalar> CentralImageSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Poisson subsample of `0..len`: each index kept independently with
/// probability `q`. The sample may be empty.
pub fn poisson_subsample(len: usize, q: f64, seed: RngSeed) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {q}")));
    }
    let mut rng = seed.rng();
    Ok((0..len).filter(|_| rng.random::<f64>() < q).collect())
}

/// `min{1, C/‖x‖₂}·x`; the zero image is returned unchanged.
pub fn clip_image<T: Scalar>(x: &ImageTensor<T>, clip_norm: T) -> ImageTensor<T> {
    let mut out = x.clone();
    clip_to_norm(out.data_mut(), clip_norm);
    out
}

/// `Δ_mean = C_c / B*_c`.
pub fn mean_sensitivity(clip_norm: f64, expected_batch: f64) -> f64 {
    clip_norm / expected_batch
}

/// `Δ_mode = √(W·H·C)`.
pub fn mode_sensitivity(shape: ImageShape) -> f64 {
    (shape.len() as f64).sqrt()
}

/// Pre-noise mean of the clipped sampled images, normalized by the expected
/// batch size. An empty sample gives the zero image.
pub fn clipped_mean<T: Scalar>(
    ds: &LabeledDataset<T>,
    sample: &[usize],
    clip_norm: f64,
    expected_batch: f64,
) -> ImageTensor<T> {
    let mut acc = vec![0.0f64; ds.shape().len()];
    let c = T::of(clip_norm);
    for &i in sample {
        let clipped = clip_image(ds.image(i), c);
        for (a, v) in acc.iter_mut().zip(clipped.data()) {
            *a += v.as_f64();
        }
    }
    let data = acc.into_iter().map(|a| T::of(a / expected_batch)).collect();
    ImageTensor::new(ds.shape(), data).expect("accumulator matches dataset shape")
}

/// One noisy mean image over the whole dataset plus the event it costs.
pub fn query_mean_image<T: Scalar>(
    ds: &LabeledDataset<T>,
    cfg: &MeanQueryConfig,
    seed: RngSeed,
) -> Result<(ImageTensor<T>, MechanismEvent)> {
    cfg.validate(ds.len())?;
    let expected = cfg.q_c * ds.len() as f64;
    let sample = poisson_subsample(ds.len(), cfg.q_c, seed.derive_named("sample"))?;
    let mut img = clipped_mean(ds, &sample, cfg.clip_norm, expected);
    let std = cfg.sigma_c * mean_sensitivity(cfg.clip_norm, expected);
    add_gaussian(&mut seed.derive_named("noise").rng(), img.data_mut(), T::of(std));
    Ok((img, event(MechanismKind::MeanQuery, cfg.q_c, cfg.sigma_c)))
}

fn event(kind: MechanismKind, q: f64, sigma_c: f64) -> MechanismEvent {
    // σ_c = 0 is allowed for noiseless debugging runs; the ledger records it as
    // an (infinitely expensive) tiny multiplier rather than rejecting the event.
    MechanismEvent { kind, q, sigma: sigma_c.max(f64::MIN_POSITIVE), repetitions: 1, partition: None }
}

/// Zero-based bin of `v` among `bins` bins `((k−1)·w, k·w]` over `[0, p_max]`.
/// Zero goes to the first bin.
#[inline]
pub fn bin_index(v: f64, bins: usize, p_max: f64) -> Result<usize> {
    if !(0.0..=p_max).contains(&v) {
        return Err(Error::invalid(format!("pixel value {v} outside [0, {p_max}]")));
    }
    let k = (v * bins as f64 / p_max).ceil() as usize;
    Ok(k.clamp(1, bins) - 1)
}

/// Counts of `values` per bin. Every value lands in exactly one bin.
pub fn pixel_histogram(values: &[f64], bins: usize, p_max: f64) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut h = vec![0u64; bins];
    for &v in values {
        h[bin_index(v, bins, p_max)?] += 1;
    }
    Ok(h)
}

/// Midpoint `(2k*−1)/2 · p_max/bins` of the (1-based) argmax bin `k*`.
/// Ties go to the lowest index.
pub fn mode_from_noisy_histogram(counts: &[f64], bins: usize, p_max: f64) -> f64 {
    debug_assert_eq!(counts.len(), bins);
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    let k_star = (best + 1) as f64;
    (2.0 * k_star - 1.0) / 2.0 * p_max / bins as f64
}

/// Pre-noise histogram of all pixels of the sampled images, laid out as
/// `counts[pixel·bins + bin]`.
pub fn mode_histogram<T: Scalar>(ds: &LabeledDataset<T>, sample: &[usize], bins: usize, p_max: f64) -> Result<Vec<f64>> {
    let d = ds.shape().len();
    let mut h = vec![0.0f64; d * bins];
    for &i in sample {
        for (j, v) in ds.image(i).data().iter().enumerate() {
            h[j * bins + bin_index(v.as_f64(), bins, p_max)?] += 1.0;
        }
    }
    Ok(h)
}

/// Per-pixel modes of a noisy histogram laid out as in [`mode_histogram`].
pub fn modes_from_histogram<T: Scalar>(shape: ImageShape, h: &[f64], bins: usize, p_max: f64) -> ImageTensor<T> {
    let data = h.chunks_exact(bins).map(|cell| T::of(mode_from_noisy_histogram(cell, bins, p_max))).collect();
    ImageTensor::new(shape, data).expect("one mode per pixel")
}

/// One noisy mode image over the whole dataset plus the event it costs.
pub fn query_mode_image<T: Scalar>(
    ds: &LabeledDataset<T>,
    cfg: &ModeQueryConfig,
    seed: RngSeed,
) -> Result<(ImageTensor<T>, MechanismEvent)> {
    cfg.validate(ds.len())?;
    let sample = poisson_subsample(ds.len(), cfg.q_c, seed.derive_named("sample"))?;
    let mut h = mode_histogram(ds, &sample, cfg.bins, cfg.p_max)?;
    let std = cfg.sigma_c * mode_sensitivity(ds.shape());
    add_gaussian(&mut seed.derive_named("noise").rng(), &mut h, std);
    let img = modes_from_histogram(ds.shape(), &h, cfg.bins, cfg.p_max);
    Ok((img, event(MechanismKind::ModeQuery, cfg.q_c, cfg.sigma_c)))
}

fn query_once<T: Scalar>(ds: &LabeledDataset<T>, query: &CentralQuery, seed: RngSeed) -> Result<(ImageTensor<T>, MechanismEvent)> {
    match query {
        CentralQuery::Mean(c) => query_mean_image(ds, c, seed),
        CentralQuery::Mode(c) => query_mode_image(ds, c, seed),
    }
}

/// Number of central images assigned to each of `classes` labels: an even
/// split with the remainder handed out round-robin from label 0.
pub fn split_per_label(n_c: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|l| n_c / classes + usize::from(l < n_c % classes)).collect()
}

/// Runs the configured query `N_c` times. With `per_label`, the `N_c` queries
/// are split across labels, each label's disjoint subset is queried on its
/// own (with `B*_c = q_c·N_label`), images carry their label, and events carry
/// the label as partition id.
pub fn query_central_set<T: Scalar>(
    ds: &LabeledDataset<T>,
    query: &CentralQuery,
    per_label: bool,
    seed: RngSeed,
) -> Result<CentralImageSet<T>> {
    let jobs: Vec<(Option<usize>, usize)> = if per_label {
        let counts = split_per_label(query.n_c(), ds.num_classes());
        counts.iter().enumerate().flat_map(|(l, &c)| (0..c).map(move |r| (Some(l), r))).collect()
    } else {
        (0..query.n_c()).map(|r| (None, r)).collect()
    };
    let parts = if per_label { ds.partition_by_label() } else { Vec::new() };
    let subsets: Vec<LabeledDataset<T>> = parts.iter().map(|idx| ds.subset(idx)).collect();

    let results: Vec<(ImageTensor<T>, MechanismEvent)> = jobs
        .par_iter()
        .map(|&(label, r)| match label {
            Some(l) => {
                let sub = &subsets[l];
                let (img, ev) = query_once(sub, &query.with_n_c(1), seed.derive(l as u64 + 1).derive(r as u64))
                    .map_err(|e| Error::invalid(format!("label {l}: {e}")))?;
                Ok((img, ev.in_partition(l as u32)))
            }
            None => query_once(ds, &query.with_n_c(1), seed.derive(0).derive(r as u64)),
        })
        .collect::<Result<_>>()?;

    let labels = jobs.iter().map(|&(l, _)| l).collect();
    let (images, events): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(CentralImageSet {
        shape: ds.shape(),
        images,
        labels,
        provenance: CentralProvenance { query: *query, per_label, events },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(n: usize, shape: ImageShape, classes: usize, seed: u64) -> LabeledDataset<f64> {
        let mut rng = RngSeed::new(seed).rng();
        let imgs = (0..n)
            .map(|_| ImageTensor::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledDataset::new(shape, imgs, labels, classes).unwrap()
    }

    #[test]
    fn subsample_contract() {
        assert_eq!(poisson_subsample(10, 1.0, RngSeed::new(1)).unwrap(), (0..10).collect::<Vec<_>>());
        let a = poisson_subsample(1000, 0.3, RngSeed::new(9)).unwrap();
        assert_eq!(a, poisson_subsample(1000, 0.3, RngSeed::new(9)).unwrap());
        assert!(poisson_subsample(5, 0.0, RngSeed::new(0)).is_err());
    }

    #[test]
    fn subsample_size_is_binomial() {
        let (n, q, trials) = (100_000usize, 0.5, 100);
        let sizes: Vec<f64> = (0..trials)
            .map(|t| poisson_subsample(n, q, RngSeed::new(t)).unwrap().len() as f64)
            .collect();
        let mean = sizes.iter().sum::<f64>() / trials as f64;
        // Standard error of the mean of 100 Binomial(n, q) draws.
        let se = (n as f64 * q * (1.0 - q) / trials as f64).sqrt();
        assert!((mean - 50_000.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn clip_examples() {
        let s = ImageShape::new(4, 1, 1).unwrap();
        let x = ImageTensor::new(s, vec![28.0f64, 28.0, 28.0, 28.0]).unwrap(); // norm 56
        let c = clip_image(&x, 28.0);
        assert!(c.data().iter().all(|&v| (v - 14.0).abs() < 1e-12));
        assert!((c.l2_norm() - 28.0).abs() < 1e-12);
        let y = ImageTensor::new(s, vec![5.0f64, 5.0, 5.0, 5.0]).unwrap(); // norm 10
        assert_eq!(clip_image(&y, 28.0), y);
        let z = ImageTensor::<f64>::zeros(s);
        assert_eq!(clip_image(&z, 28.0), z);
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(pixel_histogram(&[1.0, 3.0, 3.0, 4.0], 2, 4.0).unwrap(), vec![1, 3]);
        assert_eq!(pixel_histogram(&[], 3, 1.0).unwrap(), vec![0, 0, 0]);
        assert_eq!(pixel_histogram(&[1.0, 1.0, 1.0], 4, 1.0).unwrap(), vec![0, 0, 0, 3]);
        assert_eq!(pixel_histogram(&[0.0, 0.5], 2, 1.0).unwrap(), vec![2, 0]);
        assert!(pixel_histogram(&[1.5], 2, 1.0).is_err());
        assert!(pixel_histogram(&[-0.1], 2, 1.0).is_err());
    }

    #[test]
    fn mode_examples() {
        assert_eq!(mode_from_noisy_histogram(&[1.1, 2.4], 2, 4.0), 3.0);
        let mut c = vec![0.0; 16];
        c[2] = 9.0;
        assert_eq!(mode_from_noisy_histogram(&c, 16, 1.0), 0.15625);
        assert_eq!(mode_from_noisy_histogram(&[2.0; 5], 5, 1.0), 0.1);
    }

    #[test]
    fn noiseless_mean_of_identical_images() {
        let s = ImageShape::new(3, 3, 1).unwrap();
        let img = ImageTensor::new(s, (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        let ds = LabeledDataset::new(s, vec![img.clone(); 20], vec![0; 20], 1).unwrap();
        let cfg = MeanQueryConfig { n_c: 1, q_c: 1.0, sigma_c: 0.0, clip_norm: 28.0 };
        let (out, ev) = query_mean_image(&ds, &cfg, RngSeed::new(4)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!((ev.kind, ev.q, ev.repetitions), (MechanismKind::MeanQuery, 1.0, 1));
    }

    #[test]
    fn sensitivity_defaults() {
        assert!((mean_sensitivity(28.0, 6000.0) - 4.666_666_666_7e-3).abs() < 1e-12);
        assert_eq!(mode_sensitivity(ImageShape::new(28, 28, 1).unwrap()), 28.0);
    }

    #[test]
    fn noiseless_mode_of_binary_images() {
        let s = ImageShape::new(4, 4, 1).unwrap();
        let pattern: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let img = ImageTensor::new(s, pattern.clone()).unwrap();
        let ds = LabeledDataset::new(s, vec![img; 12], vec![0; 12], 1).unwrap();
        let cfg = ModeQueryConfig { n_c: 1, q_c: 1.0, sigma_c: 0.0, bins: 2, p_max: 1.0 };
        let (out, _) = query_mode_image(&ds, &cfg, RngSeed::new(0)).unwrap();
        let want: Vec<f64> = pattern.iter().map(|&v| if v == 1.0 { 0.75 } else { 0.25 }).collect();
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn mean_query_is_linear_without_noise() {
        let s = ImageShape::new(3, 2, 1).unwrap();
        let ds = dataset(40, s, 1, 3);
        let c = 0.37;
        let scaled = LabeledDataset::new(s, ds.images().iter().map(|im| im.scaled(c)).collect(), ds.labels().to_vec(), 1).unwrap();
        let cfg = MeanQueryConfig { n_c: 1, q_c: 0.5, sigma_c: 0.0, clip_norm: 100.0 };
        let (a, _) = query_mean_image(&ds, &cfg, RngSeed::new(8)).unwrap();
        let (b, _) = query_mean_image(&scaled, &cfg, RngSeed::new(8)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((c * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn central_set_per_label_split() {
        let s = ImageShape::new(4, 4, 1).unwrap();
        let ds = dataset(200, s, 10, 5);
        let q = CentralQuery::Mean(MeanQueryConfig { n_c: 50, q_c: 0.5, sigma_c: 5.0, clip_norm: 4.0 });
        let set = query_central_set(&ds, &q, true, RngSeed::new(1)).unwrap();
        assert_eq!(set.len(), 50);
        for l in 0..10 {
            assert_eq!(set.labels.iter().filter(|&&x| x == Some(l)).count(), 5);
        }
        let mut parts: Vec<u32> = set.provenance.events.iter().map(|e| e.partition.unwrap()).collect();
        parts.dedup();
        assert_eq!(parts, (0..10).collect::<Vec<_>>());
        assert_eq!(set, query_central_set(&ds, &q, true, RngSeed::new(1)).unwrap());

        assert_eq!(split_per_label(53, 10), vec![6, 6, 6, 5, 5, 5, 5, 5, 5, 5]);
    }

    #[test]
    fn central_set_single_image() {
        let s = ImageShape::new(4, 4, 1).unwrap();
        let ds = dataset(30, s, 2, 5);
        let q = CentralQuery::Mode(ModeQueryConfig { n_c: 1, q_c: 0.5, sigma_c: 1.0, bins: 4, p_max: 1.0 });
        let set = query_central_set(&ds, &q, false, RngSeed::new(2)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![None]);
        assert_eq!(set.provenance.events.len(), 1);
        assert_eq!(set.provenance.events[0].partition, None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MeanQueryConfig { n_c: 1, q_c: 0.001, sigma_c: 1.0, clip_norm: 1.0 };
        assert!(cfg.validate(100).is_err());
        cfg.q_c = 0.1;
        assert!(cfg.validate(100).is_ok());
        cfg.clip_norm = 0.0;
        assert!(cfg.validate(100).is_err());
        let m = ModeQueryConfig { n_c: 1, q_c: 0.5, sigma_c: 1.0, bins: 1, p_max: 1.0 };
        assert!(m.validate(10).is_err());
    }

    proptest! {
        #[test]
        fn mode_output_on_midpoint_lattice(counts in prop::collection::vec(-50.0f64..50.0, 2..20), p_max in 0.5f64..300.0) {
            let bins = counts.len();
            let m = mode_from_noisy_histogram(&counts, bins, p_max);
            prop_assert!(m > 0.0 && m < p_max);
            let k = m * 2.0 * bins as f64 / p_max;
            prop_assert!((k - k.round()).abs() < 1e-9 && (k.round() as i64) % 2 == 1);
        }
    }
}
