//! `patchmorph`: train, apply and evaluate patch-based registration models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure. The worker thread count is read from
//! `PATCHMORPH_THREADS`.

mod config;
mod manifest;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchmorph::cascade::Model;
use patchmorph::evalmetrics::{dice, MetricReport};
use patchmorph::inference::{register, warp_image, warp_labels, Placement, RegisterOptions};
use patchmorph::trainer::{prepare_images, StepRecord, TrainConfig, Trainer};
use patchmorph::volumes::synth::{synth_case_with, Anatomy, WarpConfig};
use patchmorph::volumes::{load_any, DisplacementField, ImageStack, LabelVolume};
use patchmorph::{Checkpoint, Error};

use crate::config::{parse_config, render_config};
use crate::manifest::{read_pairs, PairEntry, RunManifest};

const THREADS_ENV: &str = "PATCHMORPH_THREADS";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Usage(msg),
            Error::NonFiniteLoss { .. } | Error::Singular(_) | Error::Diff(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Attach the path to an error from reading or writing it.
fn at_path<T>(path: &Path, r: patchmorph::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mapped = CliError::from(e);
        let msg = format!("{}: {mapped}", path.display());
        match mapped {
            CliError::Usage(_) => CliError::Usage(msg),
            CliError::Data(_) => CliError::Data(msg),
            CliError::Numeric(_) => CliError::Numeric(msg),
        }
    })
}

#[derive(Parser)]
#[command(name = "patchmorph", version, about = "Stochastic multiscale patch registration of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the images of a directory.
    Train(TrainArgs),
    /// Register a moving image to a fixed image and write the displacement field.
    Register(RegisterArgs),
    /// Resample an image or label map through a displacement field.
    Warp(WarpArgs),
    /// Report Dice and Jacobian statistics for a listing of pairs.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset with known deformations.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a log line every this many iterations.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlacementArg {
    Stratified,
    Saliency,
    Uniform,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Stratified => Placement::Stratified,
            PlacementArg::Saliency => Placement::Saliency,
            PlacementArg::Uniform => Placement::Uniform,
        }
    }
}

#[derive(Args, Clone)]
struct InferenceArgs {
    /// Additional passes at the finest scale.
    #[arg(long, default_value_t = 0)]
    repeat_finest: usize,
    /// Field resolution multiplier relative to the patch voxel size.
    #[arg(long, default_value_t = 1.0)]
    canvas_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "stratified")]
    placement: PlacementArg,
    /// Patches per forward pass.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

impl InferenceArgs {
    fn options(&self) -> RegisterOptions {
        RegisterOptions {
            seed: self.seed,
            repeat_finest: self.repeat_finest,
            canvas_scale: self.canvas_scale,
            placement: self.placement.into(),
            batch_size: self.batch_size,
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Output displacement field (NIfTI).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    ddf: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map and use nearest-neighbour sampling.
    #[arg(long)]
    labels: bool,
    /// Output grid; defaults to the grid of the displacement field.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON listing `{"pairs": [...]}`; a synth manifest also works.
    #[arg(long)]
    pairs: PathBuf,
    /// Register pairs without a displacement field with this model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Line-delimited JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge length of the cubic volumes in voxels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of cases.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    labels: usize,
    /// Seed of the shared template anatomy.
    #[arg(long, default_value_t = 0)]
    template_seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().and_then(|_| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn is_volume(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "nii")
}

/// Training images of a directory: the fixed and moving images of its
/// `manifest.json` when present, otherwise every NIfTI file that is not a
/// label map or displacement field.
fn training_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
    }
    let listing = dir.join("manifest.json");
    let mut paths = if listing.is_file() {
        let mut v = Vec::new();
        for p in read_pairs(&listing).map_err(CliError::Data)? {
            for path in [p.fixed, p.moving] {
                if !v.contains(&path) {
                    v.push(path);
                }
            }
        }
        v
    } else {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().to_lowercase()).unwrap_or_default();
                is_volume(p) && !stem.contains("label") && !stem.contains("ddf")
            })
            .collect();
        v.sort();
        v
    };
    paths.dedup();
    if paths.len() < 2 {
        return Err(CliError::Data(format!(
            "{} holds {} training image(s); at least 2 are needed",
            dir.display(),
            paths.len()
        )));
    }
    Ok(paths)
}

fn load_image(path: &Path) -> CliResult<ImageStack> {
    at_path(path, ImageStack::load(path))
}

fn load_labels(path: &Path) -> CliResult<LabelVolume> {
    at_path(path, LabelVolume::load(path))
}

fn load_field(path: &Path) -> CliResult<DisplacementField> {
    at_path(path, DisplacementField::load(path))
}

fn load_model(path: &Path) -> CliResult<Model> {
    at_path(path, Model::load(path))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let paths = training_images(&a.data_dir)?;
    let images = paths.iter().map(|p| load_image(p)).collect::<CliResult<Vec<_>>>()?;
    let mut trainer = match &a.resume {
        Some(ck_path) => {
            let ck = at_path(ck_path, Checkpoint::load(ck_path).map_err(Error::from))?;
            let meta_cfg: TrainConfig = ck
                .meta
                .get("train_config")
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| CliError::Data(format!("{}: {e}", ck_path.display())))?
                .ok_or_else(|| CliError::Data(format!("{} is not a training checkpoint", ck_path.display())))?;
            let prepared = prepare_images(images, meta_cfg.crop, meta_cfg.mirror)?;
            at_path(ck_path, Trainer::resume(&ck, prepared))?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                    parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
                }
                None => match a.preset {
                    Preset::Full => TrainConfig::full(),
                    Preset::Desk => TrainConfig::desk(),
                },
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let prepared = prepare_images(images, cfg.crop, cfg.mirror)?;
            Trainer::new(cfg, prepared)?
        }
    };
    create_dir(&a.out_dir)?;
    let cfg = trainer.config.clone();
    std::fs::write(a.out_dir.join("config.toml"), render_config(&cfg))?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).map_err(Error::from)?, cfg.seed);
    for p in paths.iter().chain(a.config.iter()).chain(a.resume.iter()) {
        manifest.add_input(p)?;
    }
    manifest.artifacts.push(a.out_dir.join("config.toml"));

    let log_path = a.out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    manifest.artifacts.push(log_path);
    let out_dir = a.out_dir.clone();
    let start = Instant::now();
    let mut written = Vec::new();
    let res = trainer.run(|tr, rec: &StepRecord| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        if a.log_every > 0 && rec.iter % a.log_every == 0 {
            eprintln!(
                "iter {:>6}  scales {}  loss {:+.5}  grad {:.3}  lr {:.2e}  {:.0}s",
                rec.iter,
                rec.active_scales,
                rec.loss,
                rec.grad_norm,
                rec.lr,
                start.elapsed().as_secs_f64()
            );
        }
        let every = tr.config.checkpoint_every;
        if every > 0 && tr.iteration % every == 0 && !tr.is_done() {
            let p = out_dir.join(format!("checkpoint_{:06}.pmck", tr.iteration));
            tr.checkpoint()?.save(&p)?;
            written.push(p);
        }
        Ok(())
    });
    manifest.artifacts.extend(written);
    if let Err(e) = res {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            let p = out_dir.join("failed_state.pmck");
            if trainer.checkpoint().and_then(|ck| Ok(ck.save(&p)?)).is_ok() {
                eprintln!("state before the failing step saved to {}", p.display());
                manifest.artifacts.push(p);
            }
            manifest.write(&out_dir.join("manifest.json"))?;
        }
        return Err(e.into());
    }
    let model_path = out_dir.join("model.pmck");
    trainer.checkpoint()?.save(&model_path).map_err(Error::from)?;
    manifest.artifacts.push(model_path.clone());
    manifest.write(&out_dir.join("manifest.json"))?;
    println!("{}", model_path.display());
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> CliResult<()> {
    let opts = a.inference.options();
    let model = load_model(&a.model)?;
    let fixed = load_image(&a.fixed)?;
    let moving = load_image(&a.moving)?;
    let reg = register(&fixed, &moving, &model, &opts)?;
    at_path(&a.out, reg.field.save(&a.out))?;
    for s in &reg.passes {
        println!("{}", serde_json::to_string(s).map_err(Error::from)?);
    }
    let mut m = RunManifest::new("register", serde_json::to_value(&opts).map_err(Error::from)?, opts.seed);
    for p in [&a.model, &a.fixed, &a.moving] {
        m.add_input(p)?;
    }
    m.artifacts.push(a.out.clone());
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

fn cmd_warp(a: WarpArgs) -> CliResult<()> {
    let field = load_field(&a.ddf)?;
    let (dims, affine) = match &a.reference {
        Some(r) => {
            let v = at_path(r, load_any(r))?;
            (v.dims, v.affine)
        }
        None => (field.dims(), *field.affine()),
    };
    if a.labels {
        let labels = load_labels(&a.input)?;
        let out = warp_labels(&labels, &field, dims, affine)?;
        at_path(&a.out, out.save(&a.out))?;
    } else {
        let img = load_image(&a.input)?;
        let out = warp_image(&img, &field, dims, affine)?;
        at_path(&a.out, out.save(&a.out))?;
    }
    let mut m = RunManifest::new("warp", serde_json::json!({ "labels": a.labels }), 0);
    for p in [Some(&a.ddf), Some(&a.input), a.reference.as_ref()].into_iter().flatten() {
        m.add_input(p)?;
    }
    m.artifacts.push(a.out.clone());
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

/// One line of the evaluation report.
#[derive(serde::Serialize)]
struct PairReport<'a> {
    pair: usize,
    fixed: &'a Path,
    moving: &'a Path,
    dice_before: f64,
    dice_min_before: f64,
    #[serde(flatten)]
    report: MetricReport,
}

fn evaluate_pair(pair: &PairEntry, model: Option<&Model>, opts: &RegisterOptions) -> CliResult<(f64, f64, MetricReport)> {
    let (Some(fl), Some(ml)) = (&pair.fixed_labels, &pair.moving_labels) else {
        return Err(CliError::Data(format!(
            "pair {} / {} lacks label maps",
            pair.fixed.display(),
            pair.moving.display()
        )));
    };
    let fixed = load_image(&pair.fixed)?;
    let fixed_labels = load_labels(fl)?;
    let moving_labels = load_labels(ml)?;
    let grid = (fixed_labels.dims(), *fixed_labels.affine());
    let zero = DisplacementField::zeros(grid.0, grid.1)?;
    let before = dice(&fixed_labels, &warp_labels(&moving_labels, &zero, grid.0, grid.1)?)?;
    let start = Instant::now();
    let field = match (&pair.ddf, model) {
        (Some(p), _) => load_field(p)?,
        (None, Some(m)) => register(&fixed, &load_image(&pair.moving)?, m, opts)?.field,
        (None, None) => zero,
    };
    let runtime = start.elapsed().as_secs_f64();
    let warped = warp_labels(&moving_labels, &field, grid.0, grid.1)?;
    let report = MetricReport::evaluate(&fixed, &fixed_labels, &warped, &field, runtime)?;
    Ok((before.avg, before.min, report))
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let pairs = read_pairs(&a.pairs).map_err(CliError::Data)?;
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{} lists no pairs", a.pairs.display())));
    }
    let model = a.model.as_deref().map(load_model).transpose()?;
    let opts = a.inference.options();
    let mut out = match &a.out {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    println!(
        "{:>4}  {:>11}  {:>10}  {:>9}  {:>10}  {:>9}  {:>8}",
        "pair", "dice before", "dice after", "dice min", "|J|<=0 %", "median J", "time s"
    );
    for (i, pair) in pairs.iter().enumerate() {
        let (before, before_min, report) = evaluate_pair(pair, model.as_ref(), &opts)?;
        println!(
            "{i:>4}  {before:>11.4}  {:>10.4}  {:>9.4}  {:>10.4}  {:>9.4}  {:>8.2}",
            report.dice.avg, report.dice.min, report.frac_nonpositive_jacobian, report.median_jacobian, report.runtime_s
        );
        if let Some(f) = out.as_mut() {
            let rec = PairReport {
                pair: i,
                fixed: &pair.fixed,
                moving: &pair.moving,
                dice_before: before,
                dice_min_before: before_min,
                report,
            };
            writeln!(f, "{}", serde_json::to_string(&rec).map_err(Error::from)?)?;
        }
    }
    if let Some(p) = &a.out {
        let mut m = RunManifest::new("evaluate", serde_json::to_value(&opts).map_err(Error::from)?, opts.seed);
        m.add_input(&a.pairs)?;
        if let Some(mp) = &a.model {
            m.add_input(mp)?;
        }
        m.artifacts.push(p.clone());
        m.write(&manifest_path_for(p))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if a.n == 0 || a.size < 8 || a.labels == 0 {
        return Err(CliError::Usage("synth needs n >= 1, size >= 8 and at least one label".into()));
    }
    create_dir(&a.out_dir)?;
    let anatomy = Anatomy::generate(a.size, a.labels, a.template_seed)?;
    let config = serde_json::json!({
        "size": a.size,
        "n": a.n,
        "labels": a.labels,
        "template_seed": a.template_seed,
        "subject_warp": WarpConfig::default(),
        "pair_warp": WarpConfig::default(),
    });
    let mut m = RunManifest::new("synth", config, a.seed);
    for i in 0..a.n {
        let case = synth_case_with(&anatomy, a.seed + i as u64, &WarpConfig::default(), &WarpConfig::default())?;
        let name = |part: &str| PathBuf::from(format!("case{i:03}_{part}.nii"));
        let entry = PairEntry {
            fixed: name("fixed"),
            moving: name("moving"),
            fixed_labels: Some(name("fixed_labels")),
            moving_labels: Some(name("moving_labels")),
            ddf: None,
        };
        let true_ddf = name("true_ddf");
        let dir = &a.out_dir;
        case.fixed.save(&dir.join(&entry.fixed))?;
        case.moving.save(&dir.join(&entry.moving))?;
        case.fixed_labels.save(&dir.join(entry.fixed_labels.as_ref().unwrap()))?;
        case.moving_labels.save(&dir.join(entry.moving_labels.as_ref().unwrap()))?;
        case.true_ddf.save(&dir.join(&true_ddf))?;
        m.artifacts.extend([
            entry.fixed.clone(),
            entry.moving.clone(),
            entry.fixed_labels.clone().unwrap(),
            entry.moving_labels.clone().unwrap(),
            true_ddf,
        ]);
        m.pairs.push(entry);
    }
    m.write(&a.out_dir.join("manifest.json"))?;
    println!("{}", a.out_dir.join("manifest.json").display());
    Ok(())
}
