//! `dpwarm` command-line driver.
//!
//! Stage subcommands share a run directory laid out exactly like the one
//! `run-all` writes, so a run can be driven one stage at a time:
//!
//! ```text
//! dpwarm query-central --config smoke.toml --run-dir runs/a
//! dpwarm warmup   --run-dir runs/a
//! dpwarm finetune --run-dir runs/a
//! dpwarm sample   --run-dir runs/a
//! dpwarm evaluate --run-dir runs/a
//! ```
//!
//! Exit status: 0 on success, 1 for user errors (bad arguments, config or
//! input files, exhausted budgets), 2 for internal failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dpwarm_core::accountant::{calibrate_sigma_f, rdp_to_dp, PrivacySpec};
use dpwarm_core::dataset_io::{generate_toy_glyphs, read_idx, write_idx, Container, ContainerKind};
use dpwarm_core::diffusion::{sample_labeled, Checkpoint, DenoiserParams};
use dpwarm_core::eval::{balanced_labels, frechet_csv};
use dpwarm_core::pipeline::{
    default_run_dir, evaluate_run, ledger_at_step, load_ledger, new_ledger, query_central, run_all, run_stage2,
    samples_provenance, save_ledger, warm_up, CentralKind, CompositionSetting, PipelineConfig, PrivacySection,
};
use dpwarm_core::tensor::ImageShape;
use dpwarm_core::RngSeed;

// Shadow the std printers so a closed stdout (`dpwarm account x | head`)
// ends the process quietly instead of panicking.
macro_rules! println {
    ($($t:tt)*) => { emit(&format!("{}\n", format_args!($($t)*))) };
}

macro_rules! print {
    ($($t:tt)*) => { emit(&format!($($t)*)) };
}

fn emit(text: &str) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("internal error: writing to stdout: {e}");
        std::process::exit(2);
    }
}

#[derive(Parser)]
#[command(name = "dpwarm", version, about = "Differentially private image synthesis with private warm-up images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report the RDP curve, (ε, δ) and a calibrated σ_f for a privacy spec or ledger.
    Account(AccountArgs),
    /// Convert an IDX image/label pair into a sensitive-data container.
    Ingest(IngestArgs),
    /// Generate the synthetic glyph dataset.
    MakeToy(MakeToyArgs),
    /// Query central images and start a run directory.
    QueryCentral(QueryCentralArgs),
    /// Pre-train on the augmented central images (no privacy cost).
    Warmup(StageArgs),
    /// Calibrate σ_f and run DP-SGD fine-tuning.
    Finetune(FinetuneArgs),
    /// Draw class-balanced synthetic images from a checkpoint.
    Sample(SampleArgs),
    /// Compute the metric report and the per-checkpoint Fréchet curve.
    Evaluate(StageArgs),
    /// Run every stage and write a complete run directory.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct AccountArgs {
    /// Privacy spec (TOML) or ledger (`.json`).
    spec: PathBuf,
    /// Fine-tuning steps to calibrate σ_f for.
    #[arg(long)]
    steps: Option<u64>,
    /// Fine-tuning sampling rate to calibrate σ_f for.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, value_enum)]
    composition: Option<Composition>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    num_classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Container output path.
    #[arg(long, required_unless_present = "idx_images")]
    out: Option<PathBuf>,
    /// Also (or instead) write an IDX image file.
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline config; defaults to the run directory's `config.toml`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct QueryCentralArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    n_c: Option<usize>,
    #[arg(long)]
    q_c: Option<f64>,
    #[arg(long)]
    sigma_c: Option<f64>,
    /// Image norm bound for mean queries.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Histogram bins for mode queries.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    per_label: Option<bool>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Resume from a step checkpoint instead of starting from the warm-up model.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Defaults to `checkpoints/final.ckpt` in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the config's `eval.samples`.
    #[arg(long)]
    count: Option<usize>,
    /// Sampling seed; defaults to the seed `run-all` uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to `samples.dpwimg` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to the config's `output_dir`, else `runs/seed-N`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mean,
    Mode,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Composition {
    Global,
    Parallel,
}

impl From<Composition> for CompositionSetting {
    fn from(c: Composition) -> Self {
        match c {
            Composition::Global => CompositionSetting::Global,
            Composition::Parallel => CompositionSetting::Parallel,
        }
    }
}

/// Privacy spec accepted by `account`: a ledger plus optional calibration
/// settings.
#[derive(Deserialize)]
struct AccountFile {
    #[serde(flatten)]
    spec: PrivacySpec,
    composition: Option<CompositionSetting>,
    finetune: Option<Calibration>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Calibration {
    steps: u64,
    q: f64,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<dpwarm_core::Error> for Failure {
    fn from(e: dpwarm_core::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::User(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn user(msg: impl Into<String>) -> Failure {
    Failure::User(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Account(a) => account(a),
        Command::Ingest(a) => ingest(a),
        Command::MakeToy(a) => make_toy(a),
        Command::QueryCentral(a) => query_central_cmd(a),
        Command::Warmup(a) => warmup(a),
        Command::Finetune(a) => finetune(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RunAll(a) => run_all_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn account(args: AccountArgs) -> CliResult {
    let text = read_text(&args.spec)?;
    let file: AccountFile = if args.spec.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", args.spec.display())))?
    } else {
        toml::from_str(&text).map_err(|e| user(format!("{}: {e}", args.spec.display())))?
    };
    let spec = file.spec;
    spec.validate()?;
    let composition = args.composition.map(Into::into).or(file.composition).unwrap_or(CompositionSetting::Global);
    let accountant = PrivacySection { epsilon: spec.epsilon, delta: spec.delta, composition }.accountant();

    println!("epsilon_target={}", spec.epsilon);
    println!("delta={}", spec.delta);
    println!("events={}", spec.events.len());
    println!("finetune_steps={}", spec.step_count());
    if spec.events.is_empty() {
        println!("epsilon_spent=0");
    } else {
        let curve = accountant.curve(&spec.events)?;
        let (eps, order) = rdp_to_dp(&curve, spec.delta)?;
        println!("epsilon_spent={eps}");
        println!("best_order={order}");
        for (a, g) in curve.orders().iter().zip(curve.gammas()) {
            println!("rdp.{a}={g}");
        }
    }

    let calibration = match (args.steps, args.q, file.finetune) {
        (Some(steps), Some(q), _) => Some((steps, q)),
        (None, None, Some(c)) => Some((c.steps, c.q)),
        (None, None, None) => None,
        _ => return Err(user("--steps and --q must be given together")),
    };
    if let Some((steps, q)) = calibration {
        // Calibrate against the query stage only, whatever fine-tuning the
        // ledger already records.
        let base = ledger_at_step(&spec, 0)?;
        let sigma_f = calibrate_sigma_f(&base, &accountant, steps, q)?;
        println!("sigma_f={sigma_f}");
    }
    Ok(())
}

fn ingest(args: IngestArgs) -> CliResult {
    let ds = read_idx(&args.images, &args.labels, args.num_classes)?;
    let provenance = serde_json::json!({
        "source": "idx",
        "images": args.images.display().to_string(),
        "labels": args.labels.display().to_string(),
    })
    .to_string();
    Container::from_dataset(ContainerKind::Sensitive, &ds, provenance).save(&args.out)?;
    println!("images={}", ds.len());
    println!("shape={}x{}x{}", ds.shape().width, ds.shape().height, ds.shape().channels);
    println!("out={}", args.out.display());
    Ok(())
}

fn make_toy(args: MakeToyArgs) -> CliResult {
    let shape = ImageShape::new(args.width, args.height, args.channels)?;
    let ds = generate_toy_glyphs(args.per_class, args.classes, shape, RngSeed::new(args.seed))?;
    if let Some(out) = &args.out {
        let provenance = serde_json::json!({ "source": "toy", "seed": args.seed }).to_string();
        Container::from_dataset(ContainerKind::Sensitive, &ds, provenance).save(out)?;
        println!("out={}", out.display());
    }
    if let (Some(images), Some(labels)) = (&args.idx_images, &args.idx_labels) {
        write_idx(&ds, images, labels)?;
        println!("idx_images={}", images.display());
        println!("idx_labels={}", labels.display());
    }
    println!("images={}", ds.len());
    Ok(())
}

/// The stage's config: `--config` if given, else the run directory snapshot.
fn stage_config(stage: &StageArgs) -> CliResult<PipelineConfig> {
    let path = stage.config.clone().unwrap_or_else(|| stage.run_dir.join("config.toml"));
    if !path.exists() {
        return Err(user(format!("{} not found; pass --config or run query-central first", path.display())));
    }
    let cfg = PipelineConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn ledger_path(dir: &Path) -> PathBuf {
    dir.join("ledger.json")
}

fn checkpoint_dir(dir: &Path) -> PathBuf {
    dir.join("checkpoints")
}

fn query_central_cmd(args: QueryCentralArgs) -> CliResult {
    let mut cfg = stage_config(&args.stage)?;
    let c = &mut cfg.central;
    if let Some(kind) = args.kind {
        c.kind = match kind {
            Kind::Mean => CentralKind::Mean,
            Kind::Mode => CentralKind::Mode,
            Kind::None => CentralKind::None,
        };
    }
    c.n_c = args.n_c.unwrap_or(c.n_c);
    c.q_c = args.q_c.unwrap_or(c.q_c);
    c.sigma_c = args.sigma_c.unwrap_or(c.sigma_c);
    c.clip_norm = args.clip_norm.or(c.clip_norm);
    c.bins = args.bins.or(c.bins);
    c.per_label = args.per_label.unwrap_or(c.per_label);
    cfg.validate()?;

    let dir = &args.stage.run_dir;
    fs::create_dir_all(dir)?;
    let (data, _) = cfg.load_data()?;
    let mut ledger = new_ledger(&cfg)?;
    let central = query_central(&cfg, &data, &mut ledger)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    save_ledger(&ledger, ledger_path(dir))?;
    let central_path = dir.join("central.dpwimg");
    match &central {
        Some(set) => Container::from_central(set, data.num_classes())?.save(&central_path)?,
        None if central_path.exists() => fs::remove_file(&central_path)?,
        None => {}
    }
    println!("central_images={}", central.as_ref().map_or(0, |s| s.len()));
    println!("events={}", ledger.events.len());
    println!("epsilon_central={}", ledger.spent(&cfg.privacy.accountant())?);
    println!("ledger={}", ledger_path(dir).display());
    Ok(())
}

fn warmup(args: StageArgs) -> CliResult {
    let cfg = stage_config(&args)?;
    let dir = &args.run_dir;
    let (data, _) = cfg.load_data()?;
    let manifest = cfg.manifest_for(data.shape(), data.num_classes())?;
    let mut params = DenoiserParams::init(manifest, cfg.root_seed().derive_named("init"));
    let schedule = cfg.schedule()?;
    let central_path = dir.join("central.dpwimg");
    let mut losses = Vec::new();
    if cfg.central.query()?.is_some() {
        if !central_path.exists() {
            return Err(user(format!("{} not found; run query-central first", central_path.display())));
        }
        let central = Container::load(&central_path)?.to_central()?;
        losses = warm_up(&mut params, &central, &schedule, &cfg.warmup, cfg.root_seed().derive_named("warmup"))?;
    }
    fs::create_dir_all(checkpoint_dir(dir))?;
    let path = checkpoint_dir(dir).join("warmup.ckpt");
    Checkpoint { params, schedule, step: 0 }.save(&path)?;
    println!("iterations={}", losses.len());
    if let Some(last) = losses.last() {
        println!("final_loss={last}");
    }
    println!("checkpoint={}", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(user(format!("{} not found; run {what} first", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn finetune(args: FinetuneArgs) -> CliResult {
    let cfg = stage_config(&args.stage)?;
    let dir = &args.stage.run_dir;
    let (data, _) = cfg.load_data()?;
    let ledger = match ledger_path(dir) {
        p if p.exists() => load_ledger(&p)?,
        _ if cfg.central.query()?.is_none() => new_ledger(&cfg)?,
        p => return Err(user(format!("{} not found; run query-central first", p.display()))),
    };
    let (start, ledger, mut log) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, "finetune")?;
            let log = fs::read_to_string(dir.join("train.log")).unwrap_or_default();
            let kept: Vec<String> = log.lines().take(ckpt.step as usize).map(str::to_string).collect();
            let ledger = ledger_at_step(&ledger, ckpt.step)?;
            (ckpt, ledger, kept)
        }
        None => {
            if ledger.step_count() > 0 {
                return Err(user("ledger already records fine-tuning steps; use --resume or start a fresh run directory"));
            }
            (load_checkpoint(&checkpoint_dir(dir).join("warmup.ckpt"), "warmup")?, ledger, Vec::new())
        }
    };
    let schedule = cfg.schedule()?;
    if start.schedule != schedule {
        return Err(user("checkpoint noise schedule does not match the config"));
    }
    let out = run_stage2(&cfg, &data, start.params, ledger, start.step)?;
    let ckpts = checkpoint_dir(dir);
    fs::create_dir_all(&ckpts)?;
    for (step, params) in &out.checkpoints {
        Checkpoint { params: params.clone(), schedule: schedule.clone(), step: *step }.save(ckpts.join(format!("step-{step:06}.ckpt")))?;
    }
    let final_path = ckpts.join("final.ckpt");
    Checkpoint { params: out.params, schedule, step: cfg.finetune.steps }.save(&final_path)?;
    save_ledger(&out.ledger, ledger_path(dir))?;
    log.extend(out.log);
    let mut text = log.join("\n");
    text.push('\n');
    fs::write(dir.join("train.log"), text)?;
    println!("sigma_f={}", out.sigma_f);
    println!("steps={}", out.ledger.step_count());
    println!("epsilon_spent={}", out.ledger.spent(&cfg.privacy.accountant())?);
    println!("checkpoint={}", final_path.display());
    Ok(())
}

fn sample(args: SampleArgs) -> CliResult {
    let cfg = stage_config(&args.stage)?;
    let dir = &args.stage.run_dir;
    let path = args.checkpoint.clone().unwrap_or_else(|| checkpoint_dir(dir).join("final.ckpt"));
    let ckpt = load_checkpoint(&path, "finetune")?;
    let count = args.count.unwrap_or(cfg.eval.samples);
    let seed = match args.seed {
        Some(s) => RngSeed::new(s),
        None => cfg.root_seed().derive_named("eval-final").derive_named("samples"),
    };
    let m = ckpt.params.manifest;
    let labels = balanced_labels(count, m.num_classes);
    let images = sample_labeled(&ckpt.params.denoiser(), &ckpt.schedule, &labels, seed, cfg.model.sampler)?;
    let sigma_f = match ledger_path(dir) {
        p if p.exists() => load_ledger(&p)?.sigma_f,
        _ => None,
    };
    let generator = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let out = args.out.unwrap_or_else(|| dir.join("samples.dpwimg"));
    Container {
        kind: ContainerKind::Synthetic,
        shape: m.shape,
        num_classes: m.num_classes,
        images,
        labels: Some(labels),
        provenance: samples_provenance(&generator, cfg.seed, sigma_f),
    }
    .save(&out)?;
    println!("samples={count}");
    println!("out={}", out.display());
    Ok(())
}

fn evaluate(args: StageArgs) -> CliResult {
    let cfg = stage_config(&args)?;
    let dir = &args.run_dir;
    let (data, test) = cfg.load_data()?;
    let ckpts = checkpoint_dir(dir);
    let warm = load_checkpoint(&ckpts.join("warmup.ckpt"), "warmup")?;
    let last = load_checkpoint(&ckpts.join("final.ckpt"), "finetune")?;
    let mut steps = Vec::new();
    for entry in fs::read_dir(&ckpts)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            steps.push((step.parse::<u64>().map_err(|_| user(format!("bad checkpoint name {name}")))?, name));
        }
    }
    steps.sort();
    let intermediate = steps
        .iter()
        .map(|(s, name)| Ok((*s, Checkpoint::load(ckpts.join(name))?.params)))
        .collect::<CliResult<Vec<_>>>()?;
    let refs: Vec<_> = intermediate.iter().map(|(s, p)| (*s, p)).collect();
    let ledger = load_ledger(ledger_path(dir))?;
    let central_images = match dir.join("central.dpwimg") {
        p if p.exists() => Container::load(p)?.images.len(),
        _ => 0,
    };
    let eval = evaluate_run(&cfg, &data, test.as_ref(), &warm.params, &refs, &last.params, &ledger, central_images)?;
    let report = eval.summary.to_toml()?;
    fs::write(dir.join("metrics.toml"), &report)?;
    fs::write(dir.join("frechet.csv"), frechet_csv(&eval.summary.frechet_curve))?;
    print!("{report}");
    Ok(())
}

fn run_all_cmd(args: RunAllArgs) -> CliResult {
    let cfg = PipelineConfig::load(&args.config)?;
    cfg.validate()?;
    let dir = args.out.unwrap_or_else(|| default_run_dir(&cfg));
    let summary = run_all(&cfg, &dir)?;
    println!("run_dir={}", dir.display());
    println!("epsilon_spent={}", summary.privacy.epsilon_spent);
    println!("sigma_f={}", summary.privacy.sigma_f);
    println!("frechet_warmup={}", summary.warmup.frechet);
    println!("loss_p={}", summary.warmup.loss_p);
    println!("frechet_final={}", summary.final_report.frechet);
    if let Some(acc) = summary.final_report.acc {
        println!("acc={acc}");
    }
    Ok(())
}
