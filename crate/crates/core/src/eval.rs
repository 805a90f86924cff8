//! Desk-scale quality metrics: Fréchet distance between Gaussian fits of
//! image features, a logistic-regression probe, and warm-up diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{corrupt, sample_labeled, NoisePredictor, NoiseSchedule, SamplerOptions};
use crate::error::{Error, Result};
use crate::rng::{std_normal, RngSeed};
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, ImageTensor, LabeledDataset};

/// Largest feature dimension any extractor may produce.
pub const MAX_FEATURE_DIM: usize = 64;
/// Ridge added to both covariances when either is numerically singular.
pub const FRECHET_RIDGE: f64 = 1e-6;
/// Relative eigenvalue floor below which a covariance counts as singular.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Mean and (unbiased) covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        Ok(Self { mean, cov })
    }

    /// Requires at least `d + 1` rows of dimension `d`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let d = features.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("cannot fit a Gaussian to empty features"));
        }
        if features.len() < d + 1 {
            return Err(Error::invalid(format!("need at least {} samples for {d}-dimensional features, got {}", d + 1, features.len())));
        }
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors have different lengths"));
        }
        let n = features.len() as f64;
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let centered = DMatrix::from_fn(features.len(), d, |i, j| features[i][j] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1.0);
        // Symmetrize away rounding.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetOutcome {
    pub distance: f64,
    /// Whether [`FRECHET_RIDGE`] had to be added to the covariances.
    pub regularized: bool,
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max = eig.iter().copied().fold(0.0f64, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min < RANK_TOLERANCE * max
}

/// `V·diag(√max(λ,0))·Vᵀ` of a symmetric matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the matrix
/// square root computed as `Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_between(a: &GaussianFit, b: &GaussianFit) -> Result<FrechetOutcome> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid(format!("feature dimensions differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    let d = a.mean.len();
    let regularized = is_singular(&a.cov) || is_singular(&b.cov);
    let ridge = DMatrix::identity(d, d) * if regularized { FRECHET_RIDGE } else { 0.0 };
    let (s1, s2) = (&a.cov + &ridge, &b.cov + &ridge);
    let r1 = sqrt_psd(&s1);
    let mut inner = &r1 * &s2 * &r1;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let distance = mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !distance.is_finite() {
        return Err(Error::NumericFailure { what: "Fréchet distance is not finite".into(), diagnostics: format!("{distance}") });
    }
    Ok(FrechetOutcome { distance: distance.max(0.0), regularized })
}

pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<FrechetOutcome> {
    frechet_between(&GaussianFit::fit(feats_a)?, &GaussianFit::fit(feats_b)?)
}

/// Maps images to at most [`MAX_FEATURE_DIM`] features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureExtractor {
    /// Average pooling over `pool × pool` blocks (pool 1 = raw pixels).
    Downsample { shape: ImageShape, pool: usize },
    /// Projection onto the leading principal components of a reference set.
    Pca { shape: ImageShape, mean: Vec<f64>, components: Vec<Vec<f64>> },
}

impl FeatureExtractor {
    /// Smallest pooling that brings the feature count to at most 64.
    pub fn downsample(shape: ImageShape) -> Self {
        let pool = (1..)
            .find(|&s| shape.width.div_ceil(s) * shape.height.div_ceil(s) * shape.channels <= MAX_FEATURE_DIM)
            .expect("a full-image pool always fits for <= 64 channels");
        FeatureExtractor::Downsample { shape, pool }
    }

    /// Leading `dim` principal directions of `images`.
    pub fn fit_pca<T: Scalar>(images: &[ImageTensor<T>], dim: usize) -> Result<Self> {
        let shape = images.first().ok_or_else(|| Error::invalid("cannot fit PCA on no images"))?.shape();
        if dim == 0 || dim > MAX_FEATURE_DIM || dim > shape.len() {
            return Err(Error::invalid(format!("PCA dimension must be in 1..={}, got {dim}", MAX_FEATURE_DIM.min(shape.len()))));
        }
        let rows: Vec<Vec<f64>> = images.iter().map(|i| i.data().iter().map(|v| v.as_f64()).collect()).collect();
        if rows.len() < 2 {
            return Err(Error::invalid("PCA needs at least two images"));
        }
        let n = rows.len() as f64;
        let d = shape.len();
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        // Descending eigenvalue, ties by index for determinism.
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let components = order[..dim]
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                // Fix the sign so the largest-magnitude entry is positive.
                let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(FeatureExtractor::Pca { shape, mean, components })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::Downsample { shape, pool } => shape.width.div_ceil(*pool) * shape.height.div_ceil(*pool) * shape.channels,
            FeatureExtractor::Pca { components, .. } => components.len(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        match self {
            FeatureExtractor::Downsample { shape, .. } | FeatureExtractor::Pca { shape, .. } => *shape,
        }
    }

    pub fn extract<T: Scalar>(&self, img: &ImageTensor<T>) -> Result<Vec<f64>> {
        if img.shape() != self.shape() {
            return Err(Error::invalid(format!("extractor expects {}, got {}", self.shape(), img.shape())));
        }
        Ok(match self {
            FeatureExtractor::Downsample { shape, pool } => {
                let (gw, gh) = (shape.width.div_ceil(*pool), shape.height.div_ceil(*pool));
                let mut out = vec![0.0; gw * gh * shape.channels];
                let mut counts = vec![0.0; gw * gh];
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let cell = (y / pool) * gw + x / pool;
                        counts[cell] += 1.0;
                        for c in 0..shape.channels {
                            out[cell * shape.channels + c] += img.get(x, y, c).as_f64();
                        }
                    }
                }
                for (i, v) in out.iter_mut().enumerate() {
                    *v /= counts[i / shape.channels];
                }
                out
            }
            FeatureExtractor::Pca { mean, components, .. } => components
                .iter()
                .map(|comp| img.data().iter().zip(mean).zip(comp).map(|((v, m), c)| (v.as_f64() - m) * c).sum())
                .collect(),
        })
    }

    pub fn extract_all<T: Scalar>(&self, images: &[ImageTensor<T>]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|i| self.extract(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 1000, lr: 2.0 }
    }
}

fn design<T: Scalar>(ds: &LabeledDataset<T>) -> DMatrix<f64> {
    let d = ds.shape().len();
    DMatrix::from_fn(ds.len(), d + 1, |i, j| if j == d { 1.0 } else { ds.image(i).data()[j].as_f64() })
}

/// Multinomial logistic regression on raw pixels, trained on `train` by
/// full-batch gradient descent from zero weights; returns accuracy on `test`.
pub fn train_probe_classifier<T: Scalar>(train: &LabeledDataset<T>, test: &LabeledDataset<T>, cfg: ProbeConfig) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::DegenerateTraining("probe training set is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::invalid("probe test set is empty"));
    }
    if train.shape() != test.shape() || train.num_classes() != test.num_classes() {
        return Err(Error::invalid(format!(
            "probe sets disagree: {} with {} classes vs {} with {} classes",
            train.shape(),
            train.num_classes(),
            test.shape(),
            test.num_classes()
        )));
    }
    let first = train.label(0);
    if train.labels().iter().all(|&l| l == first) {
        return Err(Error::DegenerateTraining(format!("probe training set has a single class ({first})")));
    }
    let classes = train.num_classes();
    let x = design(train);
    let xt = x.transpose();
    let n = x.nrows() as f64;
    let mut w = DMatrix::<f64>::zeros(x.ncols(), classes);
    for _ in 0..cfg.iterations {
        let mut p = &x * &w;
        for (i, mut row) in p.row_iter_mut().enumerate() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            row /= s;
            row[train.label(i)] -= 1.0;
        }
        w -= &xt * p * (cfg.lr / n);
    }
    let scores = design(test) * w;
    let correct = (0..test.len()).filter(|&i| scores.row(i).transpose().argmax().0 == test.label(i)).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Monte-Carlo estimate of the denoising loss over `data` from `draws`
/// independent `(example, t, e)` triples. Draw `j` is seeded by
/// `seed.derive(j)`.
pub fn loss_p<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<T>,
    data: &LabeledDataset<T>,
    draws: usize,
    seed: RngSeed,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(Error::invalid("Loss-p needs a non-empty dataset and at least one draw"));
    }
    if model.shape() != data.shape() {
        return Err(Error::invalid(format!("model shape {} vs data shape {}", model.shape(), data.shape())));
    }
    let terms: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed.derive(j as u64).rng();
            let i = rng.random_range(0..data.len());
            let t = rng.random_range(1..=schedule.steps());
            let e: Vec<T> = (0..data.shape().len()).map(|_| std_normal(&mut rng)).collect();
            let xt = corrupt(data.image(i).data(), &e, t, schedule)?;
            let pred = model.predict(&xt, t, Some(data.label(i)))?;
            Ok(pred.iter().zip(&e).map(|(&p, &ei)| (p - ei).as_f64().powi(2)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / draws as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    /// Monte-Carlo draws for Loss-p.
    pub loss_draws: usize,
    /// Generated images for the Fréchet comparison.
    pub samples: usize,
    pub seed: RngSeed,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { loss_draws: 10_000, samples: 500, seed: RngSeed::new(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub frechet_regularized: bool,
    pub loss_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    pub n_real: usize,
    pub n_generated: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self.frechet.is_finite() && self.loss_p.is_finite() && self.acc.is_none_or(f64::is_finite);
        if !finite || self.frechet < 0.0 || self.loss_p < 0.0 || self.acc.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::NumericFailure { what: "metric report out of range".into(), diagnostics: format!("{self:?}") });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Class-balanced labels `0, 1, …, L−1, 0, …` for `n` generated images.
pub fn balanced_labels(n: usize, classes: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| Some(i % classes.max(1))).collect()
}

/// Loss-p over `real` plus the Fréchet distance between generated and real
/// features (FID-p at the warm-up checkpoint, FID-f at the final one).
pub fn warmup_diagnostics<P: NoisePredictor<f64> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<f64>,
    real: &LabeledDataset<f64>,
    extractor: &FeatureExtractor,
    cfg: &DiagnosticsConfig,
) -> Result<MetricReport> {
    Ok(diagnostics_with_samples(model, schedule, real, extractor, cfg, SamplerOptions::default())?.0)
}

/// Metrics plus the generated images and their labels.
type ReportWithSamples = (MetricReport, Vec<ImageTensor<f64>>, Vec<Option<usize>>);

/// [`warmup_diagnostics`] that also hands back the generated images, labeled
/// class-balanced.
pub fn diagnostics_with_samples<P: NoisePredictor<f64> + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule<f64>,
    real: &LabeledDataset<f64>,
    extractor: &FeatureExtractor,
    cfg: &DiagnosticsConfig,
    sampler: SamplerOptions,
) -> Result<ReportWithSamples> {
    let loss = loss_p(model, schedule, real, cfg.loss_draws, cfg.seed.derive_named("loss-p"))?;
    let labels = balanced_labels(cfg.samples, real.num_classes());
    let generated = sample_labeled(model, schedule, &labels, cfg.seed.derive_named("samples"), sampler)?;
    let fid = frechet_distance(&extractor.extract_all(&generated)?, &extractor.extract_all(real.images())?)?;
    let report = MetricReport {
        frechet: fid.distance,
        frechet_regularized: fid.regularized,
        loss_p: loss,
        acc: None,
        n_real: real.len(),
        n_generated: generated.len(),
    };
    report.validate()?;
    Ok((report, generated, labels))
}

/// `step,frechet` CSV of a convergence curve.
pub fn frechet_csv(rows: &[(u64, f64)]) -> String {
    let mut s = String::from("step,frechet\n");
    for (step, f) in rows {
        s.push_str(&format!("{step},{f}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::generate_toy_glyphs;
    use crate::rng::gaussian_noise;

    fn random_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = gaussian_noise(n * d, 1.0, RngSeed::new(seed)).unwrap();
        flat.chunks(d).map(|c| c.to_vec()).collect()
    }

    #[test]
    fn self_distance_is_zero() {
        let a = random_features(200, 5, 1);
        let f = frechet_distance(&a, &a).unwrap();
        assert!(f.distance < 1e-8, "{}", f.distance);
        assert!(!f.regularized);
    }

    #[test]
    fn mean_shift_only() {
        let a = random_features(300, 4, 2);
        let d = [0.5, -1.0, 2.0, 0.25];
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(d).map(|(x, s)| x + s).collect()).collect();
        let want: f64 = d.iter().map(|x| x * x).sum();
        let f = frechet_distance(&a, &b).unwrap();
        assert!((f.distance - want).abs() < 1e-9, "{} vs {want}", f.distance);
    }

    #[test]
    fn diagonal_gaussians_closed_form() {
        let (va, vb) = ([1.0, 4.0, 0.25], [2.0, 1.0, 9.0]);
        let a = GaussianFit::new(DVector::from_vec(vec![0.0, 1.0, 2.0]), DMatrix::from_diagonal(&DVector::from_vec(va.to_vec()))).unwrap();
        let b = GaussianFit::new(DVector::from_vec(vec![1.0, 1.0, 0.0]), DMatrix::from_diagonal(&DVector::from_vec(vb.to_vec()))).unwrap();
        let want = 1.0 + 4.0 + va.iter().zip(vb).map(|(x, y): (&f64, f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        let got = frechet_between(&a, &b).unwrap();
        assert!((got.distance - want).abs() < 1e-6);
        let back = frechet_between(&b, &a).unwrap();
        assert!((back.distance - got.distance).abs() < 1e-10);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let mut a = random_features(50, 3, 4);
        a.iter_mut().for_each(|r| r[2] = 0.5);
        let b = random_features(50, 3, 5);
        let f = frechet_distance(&a, &b).unwrap();
        assert!(f.regularized && f.distance.is_finite());
        assert!(frechet_distance(&a[..3], &b).is_err());
    }

    #[test]
    fn extractors() {
        let s = ImageShape::new(8, 8, 1).unwrap();
        let ds = generate_toy_glyphs(20, 10, s, RngSeed::new(1)).unwrap();
        let id = FeatureExtractor::downsample(s);
        assert_eq!(id, FeatureExtractor::Downsample { shape: s, pool: 1 });
        assert_eq!(id.extract(ds.image(3)).unwrap(), ds.image(3).data());

        let big = ImageShape::new(16, 12, 3).unwrap();
        let ex = FeatureExtractor::downsample(big);
        assert!(ex.dim() <= MAX_FEATURE_DIM);
        let ones = ImageTensor::filled(big, 0.5);
        assert!(ex.extract(&ones).unwrap().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let pca = FeatureExtractor::fit_pca(ds.images(), 10).unwrap();
        assert_eq!(pca.dim(), 10);
        assert_eq!(pca, FeatureExtractor::fit_pca(ds.images(), 10).unwrap());
        let feats = pca.extract_all(ds.images()).unwrap();
        let fit = GaussianFit::fit(&feats).unwrap();
        assert!(fit.mean.norm() < 1e-10);
        // Leading components carry non-increasing variance.
        for k in 1..10 {
            assert!(fit.cov[(k, k)] <= fit.cov[(k - 1, k - 1)] + 1e-12);
        }
        assert!(FeatureExtractor::fit_pca(ds.images(), 65).is_err());
    }

    #[test]
    fn probe_on_separable_data() {
        let s = ImageShape::new(8, 8, 1).unwrap();
        let ds = generate_toy_glyphs(100, 10, s, RngSeed::new(2)).unwrap();
        let acc = train_probe_classifier(&ds, &ds, ProbeConfig::default()).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance() {
        let s = ImageShape::new(8, 8, 1).unwrap();
        let train = generate_toy_glyphs(100, 10, s, RngSeed::new(3)).unwrap();
        let test = generate_toy_glyphs(100, 10, s, RngSeed::new(4)).unwrap();
        let mut labels = train.labels().to_vec();
        let mut rng = RngSeed::new(5).rng();
        rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng);
        let shuffled = train.with_labels(labels).unwrap();
        let acc = train_probe_classifier(&shuffled, &test, ProbeConfig::default()).unwrap();
        let n = test.len() as f64;
        let sd = (0.1 * 0.9 / n).sqrt();
        assert!((acc - 0.1).abs() <= 3.0 * sd, "{acc}");
    }

    #[test]
    fn probe_errors() {
        let s = ImageShape::new(8, 8, 1).unwrap();
        let ds = generate_toy_glyphs(5, 3, s, RngSeed::new(2)).unwrap();
        let empty = LabeledDataset::empty(s, 3).unwrap();
        assert!(matches!(train_probe_classifier(&empty, &ds, ProbeConfig::default()), Err(Error::DegenerateTraining(_))));
        let single = ds.subset(&[0, 1, 2]);
        assert!(matches!(train_probe_classifier(&single, &ds, ProbeConfig::default()), Err(Error::DegenerateTraining(_))));
    }

    /// `ê = a·x_t` for a fixed per-step scale.
    struct Linear {
        shape: ImageShape,
        scale: Vec<f64>,
    }

    impl NoisePredictor<f64> for Linear {
        fn shape(&self) -> ImageShape {
            self.shape
        }
        fn predict(&self, x_t: &[f64], t: usize, _: Option<usize>) -> Result<Vec<f64>> {
            Ok(x_t.iter().map(|x| x * self.scale[t - 1]).collect())
        }
    }

    #[test]
    fn loss_p_linear_oracle() {
        // One all-zero image: x_t = √(1−ᾱ_t)·e.
        let s = ImageShape::new(3, 2, 1).unwrap();
        let ds = LabeledDataset::new(s, vec![ImageTensor::zeros(s)], vec![0], 1).unwrap();
        let sched = NoiseSchedule::<f64>::linear(50).unwrap();
        let steps = sched.steps();

        // The exact denoiser e = x_t / √(1−ᾱ_t) sits at the zero floor.
        let perfect = Linear { shape: s, scale: (1..=steps).map(|t| 1.0 / (1.0 - sched.alpha_bar(t)).sqrt()).collect() };
        assert!(loss_p(&perfect, &sched, &ds, 2000, RngSeed::new(1)).unwrap() < 1e-20);

        // ê = x_t: loss per draw is ‖e‖²(1 − √(1−ᾱ_t))², expectation D·mean_t(c_t²).
        let ident = Linear { shape: s, scale: vec![1.0; steps] };
        let c2: Vec<f64> = (1..=steps).map(|t| (1.0 - (1.0 - sched.alpha_bar(t)).sqrt()).powi(2)).collect();
        let mean_c2 = c2.iter().sum::<f64>() / steps as f64;
        let want = s.len() as f64 * mean_c2;
        // Var of c_t²·χ²_D over uniform t.
        let d = s.len() as f64;
        let second = c2.iter().map(|c| c * c * (2.0 * d + d * d)).sum::<f64>() / steps as f64;
        let sd = ((second - want * want) / 10_000.0).sqrt();
        let got = loss_p(&ident, &sched, &ds, 10_000, RngSeed::new(2)).unwrap();
        assert!((got - want).abs() < 4.0 * sd, "{got} vs {want} (sd {sd})");
    }

    #[test]
    fn diagnostics_deterministic() {
        use crate::diffusion::{DenoiserManifest, DenoiserParams};
        let s = ImageShape::new(8, 8, 1).unwrap();
        let ds = generate_toy_glyphs(10, 10, s, RngSeed::new(6)).unwrap();
        let m = DenoiserManifest::new(s, 8, 4, 10, [32, 32]).unwrap();
        let params = DenoiserParams::init(m, RngSeed::new(7));
        let sched = NoiseSchedule::<f64>::linear(30).unwrap();
        let cfg = DiagnosticsConfig { loss_draws: 500, samples: 80, seed: RngSeed::new(8) };
        let ex = FeatureExtractor::fit_pca(ds.images(), 16).unwrap();
        let a = warmup_diagnostics(&params, &sched, &ds, &ex, &cfg).unwrap();
        let b = warmup_diagnostics(&params, &sched, &ds, &ex, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.to_toml().unwrap().contains("loss_p"));
        assert_eq!(frechet_csv(&[(0, 1.5), (10, 0.25)]), "step,frechet\n0,1.5\n10,0.25\n");
    }
}
