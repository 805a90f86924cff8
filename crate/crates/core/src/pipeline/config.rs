//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{CompositionMode, RdpAccountant};
use crate::augment::AugmentationBag;
use crate::central_query::{CentralQuery, MeanQueryConfig, ModeQueryConfig};
use crate::dataset_io::{generate_toy_glyphs, read_idx, Container};
use crate::diffusion::{DenoiserManifest, NoiseSchedule, SamplerOptions};
use crate::dpsgd::DpSgdConfig;
use crate::error::{Error, Result};
use crate::rng::RngSeed;
use crate::tensor::{ImageShape, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy {
        per_class: usize,
        classes: usize,
        width: usize,
        height: usize,
        #[serde(default = "one")]
        channels: usize,
        /// Held-out images per class drawn with an independent seed, used by
        /// the probe and the PCA extractor.
        #[serde(default)]
        test_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        num_classes: usize,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    Container {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralKind {
    Mean,
    Mode,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralSection {
    pub kind: CentralKind,
    #[serde(default)]
    pub n_c: usize,
    #[serde(default = "default_q_c")]
    pub q_c: f64,
    #[serde(default = "default_sigma_c")]
    pub sigma_c: f64,
    /// Mean query only.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Mode query only.
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default = "yes")]
    pub per_label: bool,
}

fn default_q_c() -> f64 {
    0.1
}
fn default_sigma_c() -> f64 {
    5.0
}
fn default_p_max() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl CentralSection {
    pub fn none() -> Self {
        Self { kind: CentralKind::None, n_c: 0, q_c: default_q_c(), sigma_c: default_sigma_c(), clip_norm: None, bins: None, p_max: 1.0, per_label: true }
    }

    /// The query to run, or `None` for the single-stage baseline (also when
    /// `n_c = 0`).
    pub fn query(&self) -> Result<Option<CentralQuery>> {
        if self.kind == CentralKind::None || self.n_c == 0 {
            return Ok(None);
        }
        Ok(Some(match self.kind {
            CentralKind::Mean => CentralQuery::Mean(MeanQueryConfig {
                n_c: self.n_c,
                q_c: self.q_c,
                sigma_c: self.sigma_c,
                clip_norm: self.clip_norm.ok_or_else(|| Error::Config("central.clip_norm is required for kind = \"mean\"".into()))?,
            }),
            CentralKind::Mode => CentralQuery::Mode(ModeQueryConfig {
                n_c: self.n_c,
                q_c: self.q_c,
                sigma_c: self.sigma_c,
                bins: self.bins.ok_or_else(|| Error::Config("central.bins is required for kind = \"mode\"".into()))?,
                p_max: self.p_max,
            }),
            CentralKind::None => unreachable!(),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionSetting {
    Global,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "global")]
    pub composition: CompositionSetting,
}

fn global() -> CompositionSetting {
    CompositionSetting::Global
}

impl PrivacySection {
    pub fn accountant(&self) -> RdpAccountant {
        let mode = match self.composition {
            CompositionSetting::Global => CompositionMode::Global,
            CompositionSetting::Parallel => CompositionMode::Parallel,
        };
        RdpAccountant { mode, ..RdpAccountant::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub time_dim: usize,
    pub label_dim: usize,
    pub hidden: [usize; 2],
    /// Diffusion steps `T`.
    pub steps: usize,
    #[serde(default)]
    pub sampler: SamplerOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "one")]
    pub multiplicity: usize,
    #[serde(default)]
    pub augment: AugmentationBag,
}

/// Fine-tuning settings; `σ_f` is always calibrated, never configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub clip: f64,
    pub q: f64,
    pub steps: u64,
    #[serde(default = "one")]
    pub multiplicity: usize,
    #[serde(default = "default_epsilon_every")]
    pub epsilon_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_epsilon_every() -> u64 {
    50
}

impl FinetuneSection {
    pub fn dpsgd(&self, sigma: f64) -> DpSgdConfig {
        DpSgdConfig {
            lr: self.lr,
            clip: self.clip,
            sigma,
            q: self.q,
            steps: self.steps,
            multiplicity: self.multiplicity,
            epsilon_every: self.epsilon_every,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Downsample,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_loss_draws")]
    pub loss_draws: usize,
    /// Generated images per Fréchet evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "downsample")]
    pub features: FeatureKind,
    #[serde(default = "default_pca_dim")]
    pub pca_dim: usize,
    /// Train the logistic probe on the final samples (needs test data).
    #[serde(default)]
    pub probe: bool,
    #[serde(default = "default_probe_iterations")]
    pub probe_iterations: usize,
}

fn default_loss_draws() -> usize {
    10_000
}
fn default_samples() -> usize {
    500
}
fn downsample() -> FeatureKind {
    FeatureKind::Downsample
}
fn default_pca_dim() -> usize {
    32
}
fn default_probe_iterations() -> usize {
    1000
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            loss_draws: default_loss_draws(),
            samples: default_samples(),
            features: FeatureKind::Downsample,
            pca_dim: default_pca_dim(),
            probe: false,
            probe_iterations: default_probe_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub privacy: PrivacySection,
    pub central: CentralSection,
    pub model: ModelSection,
    pub warmup: WarmupSection,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Desk-scale toy run: 8×8 glyphs, `T = 50`, 200 private steps.
    pub fn smoke() -> Self {
        Self {
            seed: 1,
            output_dir: None,
            data: DataSource::Toy { per_class: 200, classes: 10, width: 8, height: 8, channels: 1, test_per_class: 50 },
            privacy: PrivacySection { epsilon: 10.0, delta: 1e-5, composition: CompositionSetting::Global },
            central: CentralSection {
                kind: CentralKind::Mean,
                n_c: 50,
                q_c: 0.5,
                sigma_c: 5.0,
                clip_norm: Some(4.0),
                bins: None,
                p_max: 1.0,
                per_label: true,
            },
            model: ModelSection { time_dim: 16, label_dim: 8, hidden: [128, 128], steps: 50, sampler: SamplerOptions::default() },
            warmup: WarmupSection { iterations: 300, batch: 32, lr: 0.05, multiplicity: 1, augment: AugmentationBag::default() },
            finetune: FinetuneSection { lr: 0.5, clip: 1.0, q: 0.05, steps: 200, multiplicity: 1, epsilon_every: 50, checkpoint_every: 100 },
            eval: EvalSection { loss_draws: 10_000, samples: 500, ..EvalSection::default() },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn root_seed(&self) -> RngSeed {
        RngSeed::new(self.seed)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.privacy.epsilon > 0.0 && self.privacy.epsilon.is_finite()) {
            return bad(format!("privacy.epsilon must be > 0, got {}", self.privacy.epsilon));
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return bad(format!("privacy.delta must be in (0, 1), got {}", self.privacy.delta));
        }
        self.central.query()?;
        self.manifest_for(self.image_shape_hint().unwrap_or(ImageShape { width: 1, height: 1, channels: 1 }), 2)?;
        self.schedule()?;
        self.warmup.augment.validate().map_err(|e| Error::Config(format!("warmup.augment: {e}")))?;
        if self.warmup.iterations > 0 && (self.warmup.batch == 0 || !(self.warmup.lr > 0.0)) {
            return bad("warmup.batch and warmup.lr must be positive when warm-up is enabled".into());
        }
        if self.warmup.multiplicity == 0 {
            return bad("warmup.multiplicity must be at least 1".into());
        }
        self.finetune.dpsgd(1.0).validate().map_err(|e| Error::Config(format!("finetune: {e}")))?;
        if self.eval.pca_dim == 0 || self.eval.pca_dim > crate::eval::MAX_FEATURE_DIM {
            return bad(format!("eval.pca_dim must be in 1..={}", crate::eval::MAX_FEATURE_DIM));
        }
        // The Fréchet fit needs more generated samples than feature dimensions.
        let feature_dim = match (self.eval.features, self.image_shape_hint()) {
            (FeatureKind::Pca, _) => self.eval.pca_dim,
            (FeatureKind::Downsample, Some(shape)) => crate::eval::FeatureExtractor::downsample(shape).dim(),
            (FeatureKind::Downsample, None) => crate::eval::MAX_FEATURE_DIM,
        };
        if self.eval.samples <= feature_dim {
            return bad(format!("eval.samples must exceed the feature dimension {feature_dim}, got {}", self.eval.samples));
        }
        if let DataSource::Toy { per_class, classes, .. } = self.data {
            if per_class == 0 || classes == 0 {
                return bad("toy data needs per_class and classes > 0".into());
            }
        }
        Ok(())
    }

    fn image_shape_hint(&self) -> Option<ImageShape> {
        match self.data {
            DataSource::Toy { width, height, channels, .. } => ImageShape::new(width, height, channels).ok(),
            _ => None,
        }
    }

    pub fn manifest_for(&self, shape: ImageShape, num_classes: usize) -> Result<DenoiserManifest> {
        DenoiserManifest::new(shape, self.model.time_dim, self.model.label_dim, num_classes, self.model.hidden)
            .map_err(|e| Error::Config(format!("model: {e}")))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(self.model.steps).map_err(|e| Error::Config(format!("model.steps: {e}")))
    }

    /// Sensitive training data and optional held-out test data.
    pub fn load_data(&self) -> Result<(LabeledDataset<f64>, Option<LabeledDataset<f64>>)> {
        match &self.data {
            DataSource::Toy { per_class, classes, width, height, channels, test_per_class } => {
                let shape = ImageShape::new(*width, *height, *channels)?;
                let seed = self.root_seed().derive_named("toy-data");
                let train = generate_toy_glyphs(*per_class, *classes, shape, seed)?;
                let test = if *test_per_class > 0 {
                    Some(generate_toy_glyphs(*test_per_class, *classes, shape, self.root_seed().derive_named("toy-test"))?)
                } else {
                    None
                };
                Ok((train, test))
            }
            DataSource::Idx { images, labels, num_classes, test_images, test_labels } => {
                let train = read_idx(images, labels, *num_classes)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(read_idx(i, l, *num_classes)?),
                    (None, None) => None,
                    _ => return Err(Error::Config("data.test_images and data.test_labels must be given together".into())),
                };
                Ok((train, test))
            }
            DataSource::Container { path, test_path } => {
                let train = Container::load(path)?.to_dataset()?;
                let test = test_path.as_ref().map(|p| Container::load(p)?.to_dataset()).transpose()?;
                Ok((train, test))
            }
        }
    }
}
