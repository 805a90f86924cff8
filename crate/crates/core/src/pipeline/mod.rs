//! End-to-end driver: central queries, warm-up, σ_f calibration, private
//! fine-tuning, sampling and evaluation.
//!
//! A run directory written by [`run_all`] contains:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the exact configuration of the run |
//! | `ledger.json` | privacy target, calibrated σ_f and every charged event |
//! | `central.dpwimg` | the queried central images (absent for kind `none`) |
//! | `checkpoints/warmup.ckpt` | model after warm-up |
//! | `checkpoints/step-NNNNNN.ckpt` | periodic fine-tuning checkpoints |
//! | `checkpoints/final.ckpt` | model after fine-tuning |
//! | `samples.dpwimg` | class-balanced synthetic images from the final model |
//! | `train.log` | one line per private step |
//! | `frechet.csv` | Fréchet distance per checkpoint |
//! | `metrics.toml` | warm-up and final reports plus the privacy summary |
//!
//! Nothing in a run directory depends on wall-clock time, so rerunning a
//! snapshot config reproduces every file byte for byte.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    CentralKind, CentralSection, CompositionSetting, DataSource, EvalSection, FeatureKind, FinetuneSection, ModelSection,
    PipelineConfig, PrivacySection, WarmupSection,
};

use crate::accountant::{calibrate_sigma_f, MechanismKind, PrivacySpec};
use crate::augment::apply_random_chain;
use crate::central_query::{query_central_set, CentralImageSet};
use crate::dataset_io::{Container, ContainerKind};
use crate::diffusion::{loss_and_per_example_grads, Checkpoint, DenoiserParams, Example, NoiseSchedule};
use crate::dpsgd::{train, DiffusionObjective, StepReport, TrainObserver};
use crate::error::{Error, Result};
use crate::eval::{
    diagnostics_with_samples, frechet_csv, train_probe_classifier, warmup_diagnostics, DiagnosticsConfig,
    FeatureExtractor, MetricReport, ProbeConfig,
};
use crate::tensor::{ImageTensor, LabeledDataset};

pub struct Stage1Output {
    pub params: DenoiserParams<f64>,
    pub central: Option<CentralImageSet<f64>>,
    /// Ledger holding exactly the central-query events.
    pub ledger: PrivacySpec,
    /// Mean batch loss of every warm-up iteration.
    pub warmup_losses: Vec<f64>,
}

/// Fresh ledger for the configured target.
pub fn new_ledger(cfg: &PipelineConfig) -> Result<PrivacySpec> {
    PrivacySpec::new(cfg.privacy.epsilon, cfg.privacy.delta)
}

/// Runs the configured central query (if any) and charges it to `ledger`.
/// Fails with [`Error::BudgetExhausted`] when the queries alone reach the
/// target.
pub fn query_central(cfg: &PipelineConfig, data: &LabeledDataset<f64>, ledger: &mut PrivacySpec) -> Result<Option<CentralImageSet<f64>>> {
    let Some(query) = cfg.central.query()? else {
        return Ok(None);
    };
    let set = query_central_set(data, &query, cfg.central.per_label, cfg.root_seed().derive_named("central"))?;
    for ev in &set.provenance.events {
        ledger.record(*ev)?;
    }
    let spent = ledger.spent(&cfg.privacy.accountant())?;
    if spent >= ledger.epsilon {
        return Err(Error::BudgetExhausted { epsilon_w: spent, target: ledger.epsilon });
    }
    Ok(Some(set))
}

/// Non-private SGD on augmented central images. Consumes no privacy budget:
/// only the already-released central set is read.
pub fn warm_up(
    params: &mut DenoiserParams<f64>,
    central: &CentralImageSet<f64>,
    schedule: &NoiseSchedule<f64>,
    cfg: &WarmupSection,
    seed: crate::RngSeed,
) -> Result<Vec<f64>> {
    if central.is_empty() || cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let it_seed = seed.derive(it as u64);
        let mut rng = it_seed.derive_named("batch").rng();
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..central.len())).collect();
        let images: Vec<ImageTensor<f64>> = picks.iter().map(|&i| apply_random_chain(&central.images[i], &cfg.augment, &mut rng)).collect();
        let draws = it_seed.derive_named("draws");
        let batch: Vec<Example<'_, f64>> = picks
            .iter()
            .zip(&images)
            .enumerate()
            .map(|(b, (&i, image))| Example { image, label: central.labels[i], seed: draws.derive(b as u64) })
            .collect();
        let out = loss_and_per_example_grads(params, &batch, schedule, cfg.multiplicity)?;
        let scale = cfg.lr / batch.len() as f64;
        let mut step = vec![0.0; params.len()];
        for g in &out.grads {
            for (s, v) in step.iter_mut().zip(g) {
                *s += v;
            }
        }
        for (p, s) in params.values.iter_mut().zip(&step) {
            *p -= scale * s;
        }
        if !out.loss.is_finite() || params.values.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateTraining(format!("warm-up diverged at iteration {}", it + 1)));
        }
        losses.push(out.loss);
    }
    Ok(losses)
}

/// Stage I: central query plus warm-up from a fresh initialization.
pub fn run_stage1(cfg: &PipelineConfig, data: &LabeledDataset<f64>) -> Result<Stage1Output> {
    cfg.validate()?;
    let mut ledger = new_ledger(cfg)?;
    let central = query_central(cfg, data, &mut ledger)?;
    let manifest = cfg.manifest_for(data.shape(), data.num_classes())?;
    let mut params = DenoiserParams::init(manifest, cfg.root_seed().derive_named("init"));
    let schedule = cfg.schedule()?;
    let warmup_losses = match &central {
        Some(set) => warm_up(&mut params, set, &schedule, &cfg.warmup, cfg.root_seed().derive_named("warmup"))?,
        None => Vec::new(),
    };
    Ok(Stage1Output { params, central, ledger, warmup_losses })
}

pub struct Stage2Output {
    pub params: DenoiserParams<f64>,
    pub sigma_f: f64,
    pub ledger: PrivacySpec,
    pub log: Vec<String>,
    /// `(steps done, parameters)` at every checkpoint interval.
    pub checkpoints: Vec<(u64, DenoiserParams<f64>)>,
}

#[derive(Default)]
struct Recorder {
    log: Vec<String>,
    checkpoints: Vec<(u64, Vec<f64>)>,
}

impl TrainObserver<f64> for Recorder {
    fn on_step(&mut self, report: &StepReport, epsilon: Option<f64>) -> Result<()> {
        self.log.push(report.log_line(epsilon));
        Ok(())
    }

    fn on_checkpoint(&mut self, steps_done: u64, params: &[f64]) -> Result<()> {
        self.checkpoints.push((steps_done, params.to_vec()));
        Ok(())
    }
}

/// Stage II: calibrate σ_f against the budget left after `ledger`, then run
/// DP-SGD on the sensitive data. With `start_step > 0` the run resumes and
/// reuses the σ_f already stored in the ledger.
pub fn run_stage2(
    cfg: &PipelineConfig,
    data: &LabeledDataset<f64>,
    mut params: DenoiserParams<f64>,
    mut ledger: PrivacySpec,
    start_step: u64,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let accountant = cfg.privacy.accountant();
    let done = ledger.step_count();
    if done != start_step {
        return Err(Error::invalid(format!("ledger records {done} fine-tuning steps but resuming at step {start_step}")));
    }
    let sigma_f = match (start_step, ledger.sigma_f) {
        (0, _) => calibrate_sigma_f(&ledger, &accountant, cfg.finetune.steps, cfg.finetune.q)?,
        (_, Some(s)) => s,
        (_, None) => return Err(Error::invalid("resuming requires a ledger with a calibrated sigma_f")),
    };
    ledger.sigma_f = Some(sigma_f);
    let schedule = cfg.schedule()?;
    let objective = DiffusionObjective { manifest: &params.manifest, schedule: &schedule, data };
    let dp_cfg = cfg.finetune.dpsgd(sigma_f);
    let mut rec = Recorder::default();
    let mut values = params.values.clone();
    train(&mut values, &objective, &dp_cfg, &mut ledger, &accountant, cfg.root_seed().derive_named("finetune"), start_step, &mut rec)?;
    params.values = values;
    let manifest = params.manifest;
    let checkpoints = rec
        .checkpoints
        .into_iter()
        .map(|(s, v)| Ok((s, DenoiserParams::new(manifest, v)?)))
        .collect::<Result<_>>()?;
    Ok(Stage2Output { params, sigma_f, ledger, log: rec.log, checkpoints })
}

/// Feature extractor for the configured evaluation.
pub fn feature_extractor(cfg: &PipelineConfig, data: &LabeledDataset<f64>, test: Option<&LabeledDataset<f64>>) -> Result<FeatureExtractor> {
    match cfg.eval.features {
        FeatureKind::Downsample => Ok(FeatureExtractor::downsample(data.shape())),
        FeatureKind::Pca => {
            let reference = test.ok_or_else(|| Error::Config("eval.features = \"pca\" needs held-out test data".into()))?;
            FeatureExtractor::fit_pca(reference.images(), cfg.eval.pca_dim)
        }
    }
}

pub fn diagnostics_config(cfg: &PipelineConfig, name: &str) -> DiagnosticsConfig {
    DiagnosticsConfig { loss_draws: cfg.eval.loss_draws, samples: cfg.eval.samples, seed: cfg.root_seed().derive_named(name) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub epsilon_target: f64,
    pub delta: f64,
    /// ε of the central queries alone.
    pub epsilon_central: f64,
    /// ε of the full ledger.
    pub epsilon_spent: f64,
    pub sigma_f: f64,
    pub central_events: usize,
    pub finetune_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub privacy: PrivacySummary,
    /// Diagnostics at fine-tune start (FID-p, Loss-p).
    pub warmup: MetricReport,
    /// Diagnostics after fine-tuning (FID-f).
    #[serde(rename = "final")]
    pub final_report: MetricReport,
    pub central_images: usize,
    /// Fréchet distance per checkpoint, step 0 being the warmed model.
    pub frechet_curve: Vec<(u64, f64)>,
}

impl RunSummary {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn save_ledger(ledger: &PrivacySpec, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(ledger).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_ledger(path: impl AsRef<Path>) -> Result<PrivacySpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let ledger: PrivacySpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ledger.validate()?;
    Ok(ledger)
}

/// The ledger as it stood after `step` fine-tuning steps: every central event
/// plus the first `step` DP-SGD events. Used to resume from a checkpoint.
pub fn ledger_at_step(ledger: &PrivacySpec, step: u64) -> Result<PrivacySpec> {
    let done = ledger.step_count();
    if step > done {
        return Err(Error::invalid(format!("ledger records only {done} fine-tuning steps, cannot resume at step {step}")));
    }
    let mut kept = 0;
    let events = ledger
        .events
        .iter()
        .copied()
        .filter(|e| {
            if e.kind != MechanismKind::DpsgdStep {
                return true;
            }
            kept += e.repetitions;
            kept <= step
        })
        .collect();
    let out = PrivacySpec { events, ..ledger.clone() };
    if out.step_count() != step {
        return Err(Error::invalid(format!("ledger step events do not split at step {step}")));
    }
    Ok(out)
}

fn central_epsilon(cfg: &PipelineConfig, ledger: &PrivacySpec) -> Result<f64> {
    let central: Vec<_> = ledger.events.iter().copied().filter(|e| e.kind != MechanismKind::DpsgdStep).collect();
    if central.is_empty() {
        return Ok(0.0);
    }
    PrivacySpec { events: central, ..ledger.clone() }.spent(&cfg.privacy.accountant())
}

/// Everything the run produced, before anything is written to disk.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
    pub samples: Vec<ImageTensor<f64>>,
    pub sample_labels: Vec<Option<usize>>,
}

/// Runs both stages and all diagnostics in memory.
pub fn execute(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (data, test) = cfg.load_data()?;
    let stage1 = run_stage1(cfg, &data)?;
    let stage2 = run_stage2(cfg, &data, stage1.params.clone(), stage1.ledger.clone(), 0)?;
    let intermediate: Vec<_> = stage2.checkpoints.iter().map(|(s, p)| (*s, p)).collect();
    let central_images = stage1.central.as_ref().map_or(0, CentralImageSet::len);
    let eval = evaluate_run(
        cfg,
        &data,
        test.as_ref(),
        &stage1.params,
        &intermediate,
        &stage2.params,
        &stage2.ledger,
        central_images,
    )?;
    Ok(RunArtifacts { summary: eval.summary, stage1, stage2, samples: eval.samples, sample_labels: eval.sample_labels })
}

pub struct Evaluation {
    pub summary: RunSummary,
    pub samples: Vec<ImageTensor<f64>>,
    pub sample_labels: Vec<Option<usize>>,
}

/// Diagnostics for a finished run: full reports for the warmed and final
/// models, a Fréchet-only pass over intermediate checkpoints, the optional
/// probe, and the privacy summary of `ledger`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    cfg: &PipelineConfig,
    data: &LabeledDataset<f64>,
    test: Option<&LabeledDataset<f64>>,
    warmed: &DenoiserParams<f64>,
    intermediate: &[(u64, &DenoiserParams<f64>)],
    last: &DenoiserParams<f64>,
    ledger: &PrivacySpec,
    central_images: usize,
) -> Result<Evaluation> {
    let schedule = cfg.schedule()?;
    let extractor = feature_extractor(cfg, data, test)?;
    let warm_report = warmup_diagnostics(warmed, &schedule, data, &extractor, &diagnostics_config(cfg, "eval-warmup"))?;
    let mut curve = vec![(0, warm_report.frechet)];
    for &(step, params) in intermediate {
        if step == cfg.finetune.steps {
            continue;
        }
        let r = warmup_diagnostics(params, &schedule, data, &extractor, &DiagnosticsConfig { loss_draws: 1, ..diagnostics_config(cfg, "eval-curve") })?;
        curve.push((step, r.frechet));
    }
    let (mut final_report, samples, sample_labels) =
        diagnostics_with_samples(last, &schedule, data, &extractor, &diagnostics_config(cfg, "eval-final"), cfg.model.sampler)?;
    if cfg.finetune.steps > 0 {
        curve.push((cfg.finetune.steps, final_report.frechet));
    }
    if cfg.eval.probe {
        let test = test.ok_or_else(|| Error::Config("eval.probe needs held-out test data".into()))?;
        let labels = sample_labels.iter().map(|l| l.expect("balanced labels are always set")).collect();
        let synth = LabeledDataset::new(data.shape(), samples.clone(), labels, data.num_classes())?;
        final_report.acc = Some(train_probe_classifier(&synth, test, ProbeConfig { iterations: cfg.eval.probe_iterations, ..ProbeConfig::default() })?);
    }

    let sigma_f = ledger.sigma_f.ok_or_else(|| Error::invalid("ledger has no calibrated sigma_f; run fine-tuning first"))?;
    let summary = RunSummary {
        privacy: PrivacySummary {
            epsilon_target: ledger.epsilon,
            delta: ledger.delta,
            epsilon_central: central_epsilon(cfg, ledger)?,
            epsilon_spent: ledger.spent(&cfg.privacy.accountant())?,
            sigma_f,
            central_events: ledger.events.iter().filter(|e| e.kind != MechanismKind::DpsgdStep).count(),
            finetune_events: ledger.step_count() as usize,
        },
        warmup: warm_report,
        final_report,
        central_images,
        frechet_curve: curve,
    };
    Ok(Evaluation { summary, samples, sample_labels })
}

/// Provenance string stored in a synthetic sample container.
pub fn samples_provenance(generator: &str, seed: u64, sigma_f: Option<f64>) -> String {
    serde_json::json!({ "generator": generator, "seed": seed, "sigma_f": sigma_f }).to_string()
}

fn checkpoint(params: &DenoiserParams<f64>, schedule: &NoiseSchedule<f64>, step: u64) -> Checkpoint {
    Checkpoint { params: params.clone(), schedule: schedule.clone(), step }
}

/// Runs everything and writes the run directory (see the module docs).
pub fn run_all(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    let out = out_dir.as_ref();
    cfg.validate()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let art = execute(cfg)?;
    let schedule = cfg.schedule()?;
    let shape = art.stage1.params.manifest.shape;
    let num_classes = art.stage1.params.manifest.num_classes;

    if let Some(central) = &art.stage1.central {
        Container::from_central(central, num_classes)?.save(out.join("central.dpwimg"))?;
    }
    checkpoint(&art.stage1.params, &schedule, 0).save(ckpt_dir.join("warmup.ckpt"))?;
    for (step, params) in &art.stage2.checkpoints {
        checkpoint(params, &schedule, *step).save(ckpt_dir.join(format!("step-{step:06}.ckpt")))?;
    }
    checkpoint(&art.stage2.params, &schedule, cfg.finetune.steps).save(ckpt_dir.join("final.ckpt"))?;
    save_ledger(&art.stage2.ledger, out.join("ledger.json"))?;

    let provenance = samples_provenance("final.ckpt", cfg.seed, Some(art.stage2.sigma_f));
    Container {
        kind: ContainerKind::Synthetic,
        shape,
        num_classes,
        images: art.samples.clone(),
        labels: Some(art.sample_labels.clone()),
        provenance,
    }
    .save(out.join("samples.dpwimg"))?;

    let mut log = art.stage2.log.join("\n");
    log.push('\n');
    fs::write(out.join("train.log"), log)?;
    fs::write(out.join("frechet.csv"), frechet_csv(&art.summary.frechet_curve))?;
    fs::write(out.join("metrics.toml"), art.summary.to_toml()?)?;
    Ok(art.summary)
}

/// Default run directory for a config: its `output_dir`, else `runs/seed-N`.
pub fn default_run_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)))
}

/// One seed of the warm-up versus no-warm-up comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub seed: u64,
    pub frechet_warm: f64,
    pub frechet_none: f64,
    pub loss_p_warm: f64,
    pub loss_p_none: f64,
    pub sigma_f_warm: f64,
    pub sigma_f_none: f64,
}

/// The baseline twin of `cfg`: no central queries and no warm-up, same
/// target budget, data and seeds.
pub fn baseline_of(cfg: &PipelineConfig) -> PipelineConfig {
    let mut base = cfg.clone();
    base.central = CentralSection { kind: CentralKind::None, ..cfg.central.clone() };
    base.warmup.iterations = 0;
    base
}

/// Runs `cfg` and its baseline for every seed.
pub fn paired_warmup_experiment(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Vec<PairedOutcome>> {
    seeds
        .iter()
        .map(|&seed| {
            let warm_cfg = PipelineConfig { seed, ..cfg.clone() };
            let warm = execute(&warm_cfg)?.summary;
            let none = execute(&baseline_of(&warm_cfg))?.summary;
            Ok(PairedOutcome {
                seed,
                frechet_warm: warm.final_report.frechet,
                frechet_none: none.final_report.frechet,
                loss_p_warm: warm.warmup.loss_p,
                loss_p_none: none.warmup.loss_p,
                sigma_f_warm: warm.privacy.sigma_f,
                sigma_f_none: none.privacy.sigma_f,
            })
        })
        .collect()
}

pub fn paired_csv(rows: &[PairedOutcome]) -> String {
    let mut s = String::from("seed,frechet_warm,frechet_none,loss_p_warm,loss_p_none,sigma_f_warm,sigma_f_none\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.seed, r.frechet_warm, r.frechet_none, r.loss_p_warm, r.loss_p_none, r.sigma_f_warm, r.sigma_f_none
        ));
    }
    s
}
