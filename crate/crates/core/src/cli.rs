//! Command-line entry point.
//!
//! Every option can also come from a TOML or JSON file passed with
//! `--config`, using the flag name as key (`mask-to-brain = true`). Flags win
//! over the file, the file wins over defaults. The resolved configuration is
//! logged to stderr and written next to the artifacts as `config.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aem::{asymmetry_map, extract_tumor};
use crate::dataset::{generate_corpus, make_splits, CorpusMethod, CorpusOptions, Kind, Manifest, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, Combination};
use crate::io;
use crate::kdtrain::{
    load_checkpoint, log_csv, post_train, save_checkpoint, train_standard, DropPolicy, KDSchedule, Regime, SegLossKind,
    ToyModel, TrainConfig, DEFAULT_HIDDEN, DEFAULT_LR,
};
use crate::phantom::cohort;
use crate::symmetry::{calibrate_detailed, DEFAULT_RADIUS};
use crate::synth::{synthesize, SynthConfig};
use crate::volume::{normalize_sample, Axis, Dims, Modality, Sample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "asymforge", version, about = "Tumor transplant synthesis and missing-modality post-training")]
pub struct Cli {
    /// TOML or JSON file with option defaults (keys are flag names).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Find the mirror offset of a sample and print the cost table as CSV.
    Calibrate(CalibrateArgs),
    /// Write per-modality asymmetry maps of a sample.
    Aem(AemArgs),
    /// Transplant the donor's tumor into the host.
    Synth(SynthArgs),
    /// Split real samples and generate the synthetic corpus.
    MakeDataset(MakeDatasetArgs),
    /// Train on synthetic samples only.
    Pretrain(TrainArgs),
    /// Train or fine-tune on real samples.
    Finetune(TrainArgs),
    /// Distillation-based post-training with one modality removed.
    Posttrain(PosttrainArgs),
    /// Dice over all 15 modality combinations.
    Eval(EvalArgs),
    /// Print dims, availability and label histogram of a sample.
    Inspect(InspectArgs),
    /// Write a toy cohort of symmetric phantoms with tumors.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long, value_enum)]
    pub axis: Option<AxisArg>,
}

#[derive(Args, Debug)]
pub struct AemArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Sample directory, or an id when `--manifest` is given.
    #[arg(long)]
    pub host: String,
    #[arg(long)]
    pub donor: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mask_to_brain: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    /// Directory holding one subdirectory per real sample.
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ratio: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split sizes as `train,val,test`; defaults to the 219/50/100 proportions.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Beta(alpha, alpha) parameter for mixup.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mask_to_brain: bool,
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint; a fresh model is initialized from the seed otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    /// Modalities for the one-to-one regime, e.g. `F+T1ce`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Fine-tune on synthetic and real samples together.
    #[arg(long)]
    pub mixed: bool,
}

#[derive(Args, Debug)]
pub struct PosttrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub distill_predictions: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub sample: PathBuf,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Cube side length in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisArg {
    Depth,
    Height,
    Width,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::Depth => Axis::Depth,
            AxisArg::Height => Axis::Height,
            AxisArg::Width => Axis::Width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Transplant,
    Mixup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    Full,
    OneToMany,
    OneToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    CrossEntropy,
    SoftDice,
}

impl From<LossArg> for SegLossKind {
    fn from(l: LossArg) -> SegLossKind {
        match l {
            LossArg::CrossEntropy => SegLossKind::CrossEntropy,
            LossArg::SoftDice => SegLossKind::SoftDice,
        }
    }
}

/// Options read from `--config`. Keys mirror the long flag names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub radius: Option<usize>,
    pub axis: Option<AxisArg>,
    pub mask_to_brain: Option<bool>,
    pub ratio: Option<u32>,
    pub workers: Option<usize>,
    pub split: Option<String>,
    pub method: Option<MethodArg>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub hidden: Option<usize>,
    pub batch_size: Option<usize>,
    pub regime: Option<RegimeArg>,
    pub modalities: Option<String>,
    pub loss: Option<LossArg>,
    pub mixed: Option<bool>,
    pub k: Option<usize>,
    pub distill_predictions: Option<bool>,
    pub n: Option<usize>,
    pub size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn pick_bool(flag: bool, file: Option<bool>) -> bool {
    flag || file.unwrap_or(false)
}

fn log_resolved<T: Serialize>(command: &str, resolved: &T, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string(resolved)?;
    info!("resolved config for {command}: {json}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        let pretty = format!("{}\n", serde_json::to_string_pretty(resolved)?);
        fs::write(&path, pretty).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Calibrate(a) => calibrate_cmd(a, &file),
        Command::Aem(a) => aem_cmd(a, &file),
        Command::Synth(a) => synth_cmd(a, &file),
        Command::MakeDataset(a) => make_dataset_cmd(a, &file),
        Command::Pretrain(a) => train_cmd(a, &file, Stage::Pretrain),
        Command::Finetune(a) => train_cmd(a, &file, Stage::Finetune),
        Command::Posttrain(a) => posttrain_cmd(a, &file),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Phantom(a) => phantom_cmd(a, &file),
    }
}

fn calibrate_cmd(a: CalibrateArgs, file: &RunConfig) -> Result<()> {
    let radius = pick(a.radius, file.radius, DEFAULT_RADIUS);
    let axis: Axis = pick(a.axis, file.axis, AxisArg::Width).into();
    log_resolved("calibrate", &serde_json::json!({ "in": a.input, "radius": radius, "axis": axis }), None)?;
    let (image, _) = io::load_sample_dir(&a.input)?;
    let cal = calibrate_detailed(&image, axis, radius)?;
    info!(
        "chosen offset {} (midplane shift {:.1}) with cost {}",
        cal.spec.offset,
        cal.spec.midplane_shift(),
        cal.cost_at(cal.spec.offset).unwrap_or(0)
    );
    println!("chosen_offset,{}", cal.spec.offset);
    print!("{}", cal.to_csv());
    Ok(())
}

fn aem_cmd(a: AemArgs, file: &RunConfig) -> Result<()> {
    let radius = pick(a.radius, file.radius, DEFAULT_RADIUS);
    log_resolved("aem", &serde_json::json!({ "in": a.input, "out": a.out, "radius": radius }), Some(&a.out))?;
    let (image, labels) = io::load_sample_dir(&a.input)?;
    let image = normalize_sample(&image)?;
    let cal = calibrate_detailed(&image, Axis::Width, radius)?;
    let d = asymmetry_map(&image, cal.spec);
    let mid = image.dims().depth / 2;
    for (m, v) in d.present() {
        io::write_volume(&a.out.join(format!("aem_{}.mmv", m.stem())), v)?;
        io::write_pgm_slice(&a.out.join(format!("aem_{}_mid.pgm", m.stem())), v, mid)?;
    }
    if let Some(y) = labels {
        let t = extract_tumor(&d, &y)?;
        for (m, v) in t.present() {
            io::write_volume(&a.out.join(format!("tumor_{}.mmv", m.stem())), v)?;
        }
    }
    let mirror = a.out.join("mirror.json");
    fs::write(&mirror, format!("{}\n", serde_json::to_string_pretty(&cal.spec)?)).map_err(|e| Error::io(&mirror, e))?;
    info!("wrote asymmetry maps to {}", a.out.display());
    Ok(())
}

fn load_normalized(dir: &Path) -> Result<Sample> {
    let mut s = io::load_labelled_dir(dir)?;
    s.image = normalize_sample(&s.image)?;
    Ok(s)
}

fn synth_cmd(a: SynthArgs, file: &RunConfig) -> Result<()> {
    let seed = pick(a.seed, file.seed, 0);
    let cfg = SynthConfig {
        radius: pick(a.radius, file.radius, DEFAULT_RADIUS),
        mask_to_brain: pick_bool(a.mask_to_brain, file.mask_to_brain),
        ..SynthConfig::default()
    };
    log_resolved(
        "synth",
        &serde_json::json!({ "host": a.host, "donor": a.donor, "manifest": a.manifest, "seed": seed, "synth": cfg }),
        Some(&a.out),
    )?;
    let (host, donor) = match &a.manifest {
        Some(mpath) => {
            let m = Manifest::load(mpath)?;
            let dir = mpath.parent().unwrap_or(Path::new("."));
            let find = |id: &str| {
                m.entries
                    .iter()
                    .find(|e| e.id == id)
                    .ok_or_else(|| Error::InvalidManifest(format!("no entry with id '{id}'")))
            };
            (m.load_entry(find(&a.host)?, dir)?, m.load_entry(find(&a.donor)?, dir)?)
        }
        None => (load_normalized(Path::new(&a.host))?, load_normalized(Path::new(&a.donor))?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synthesize(&host, &donor, &cfg, seed, &mut rng)?;
    io::save_sample(&a.out, &s.image, Some(&s.labels))?;
    let prov = a.out.join("provenance.json");
    fs::write(&prov, format!("{}\n", serde_json::to_string_pretty(&s.provenance)?)).map_err(|e| Error::io(&prov, e))?;
    info!("wrote synthetic sample to {}", a.out.display());
    Ok(())
}

/// Split sizes following the 219/50/100 proportions of a 369-case cohort.
fn default_split(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 219.0 / 369.0).round() as usize;
    let val = (n as f64 * 50.0 / 369.0).round() as usize;
    (train, val, n.saturating_sub(train + val))
}

fn parse_split(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("split must be train,val,test counts, got '{s}'")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidConfig(format!("split must have three counts, got '{s}'"))),
    }
}

fn list_sample_dirs(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Serialize)]
struct MakeDatasetResolved<'a> {
    real: &'a Path,
    out: &'a Path,
    ratio: u32,
    workers: usize,
    seed: u64,
    split: (usize, usize, usize),
    method: MethodArg,
    alpha: Option<f64>,
    synth: SynthConfig,
}

fn make_dataset_cmd(a: MakeDatasetArgs, file: &RunConfig) -> Result<()> {
    let ids = list_sample_dirs(&a.real)?;
    let split = match a.split.as_ref().or(file.split.as_ref()) {
        Some(s) => parse_split(s)?,
        None => default_split(ids.len()),
    };
    let method = pick(a.method, file.method, MethodArg::Transplant);
    let alpha = a.alpha.or(file.alpha);
    let corpus_method = match (method, alpha) {
        (MethodArg::Transplant, Some(_)) => {
            return Err(Error::ConfigConflict("--alpha only applies to --method mixup".into()));
        }
        (MethodArg::Transplant, None) => CorpusMethod::Transplant,
        (MethodArg::Mixup, alpha) => CorpusMethod::Mixup {
            alpha: alpha.unwrap_or(0.4),
        },
    };
    let mut opts = CorpusOptions::new(pick(a.ratio, file.ratio, 4), pick(a.workers, file.workers, 8), pick(a.seed, file.seed, 0));
    opts.method = corpus_method;
    opts.synth.radius = pick(a.radius, file.radius, DEFAULT_RADIUS);
    opts.synth.mask_to_brain = pick_bool(a.mask_to_brain, file.mask_to_brain);
    let resolved = MakeDatasetResolved {
        real: &a.real,
        out: &a.out,
        ratio: opts.ratio,
        workers: opts.workers,
        seed: opts.seed,
        split,
        method,
        alpha: match corpus_method {
            CorpusMethod::Mixup { alpha } => Some(alpha),
            CorpusMethod::Transplant => None,
        },
        synth: opts.synth,
    };
    log_resolved("make-dataset", &resolved, Some(&a.out))?;

    let mut manifest = make_splits(&ids, split, opts.seed)?;
    let real_root = fs::canonicalize(&a.real).map_err(|e| Error::io(&a.real, e))?;
    manifest.real_root = Some(real_root.to_string_lossy().into_owned());
    let report = generate_corpus(&manifest, &a.out, &a.out, &opts)?;
    report.manifest.save(&a.out.join(MANIFEST_FILE))?;
    info!(
        "wrote {} synthetic entries to {}",
        report.manifest.synthetic_count(),
        a.out.display()
    );
    if !report.failures.is_empty() {
        for (id, e) in &report.failures {
            error!("{id}: {e}");
        }
        return Err(Error::io(
            &a.out,
            std::io::Error::other(format!("{} synthetic entries failed", report.failures.len())),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Finetune,
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn resolve_regime(regime: RegimeArg, modalities: Option<&String>) -> Result<Regime> {
    match (regime, modalities) {
        (RegimeArg::OneToOne, Some(m)) => Ok(Regime::OneToOne(m.parse()?)),
        (RegimeArg::OneToOne, None) => Err(Error::ConfigConflict("regime one-to-one needs --modalities".into())),
        (_, Some(_)) => Err(Error::ConfigConflict("--modalities only applies to regime one-to-one".into())),
        (RegimeArg::Full, None) => Ok(Regime::Full),
        (RegimeArg::OneToMany, None) => Ok(Regime::OneToMany),
    }
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    stage: &'static str,
    manifest: &'a Path,
    out: &'a Path,
    init: Option<&'a Path>,
    hidden: usize,
    mixed: bool,
    train: &'a TrainConfig,
}

fn initial_model(init: Option<&Path>, hidden: usize, seed: u64) -> Result<ToyModel> {
    match init {
        Some(p) => load_checkpoint(p),
        None => Ok(ToyModel::random(hidden, &mut ChaCha8Rng::seed_from_u64(seed))),
    }
}

fn train_cmd(a: TrainArgs, file: &RunConfig, stage: Stage) -> Result<()> {
    let name = match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    };
    let mixed = pick_bool(a.mixed, file.mixed);
    if mixed && stage == Stage::Pretrain {
        return Err(Error::ConfigConflict("--mixed only applies to finetune".into()));
    }
    let hidden = pick(a.hidden, file.hidden, DEFAULT_HIDDEN);
    if hidden == 0 {
        return Err(Error::InvalidConfig("hidden width must be at least 1".into()));
    }
    let cfg = TrainConfig {
        epochs: pick(a.epochs, file.epochs, 300),
        lr: pick(a.lr, file.lr, DEFAULT_LR),
        batch_size: a.batch_size.or(file.batch_size),
        regime: resolve_regime(pick(a.regime, file.regime, RegimeArg::Full), a.modalities.as_ref().or(file.modalities.as_ref()))?,
        loss: pick(a.loss, file.loss, LossArg::CrossEntropy).into(),
        seed: pick(a.seed, file.seed, 0),
        ..TrainConfig::default()
    };
    log_resolved(
        name,
        &TrainResolved {
            stage: name,
            manifest: &a.manifest,
            out: &a.out,
            init: a.init.as_deref(),
            hidden,
            mixed,
            train: &cfg,
        },
        Some(&a.out),
    )?;
    let manifest = Manifest::load(&a.manifest)?;
    let dir = manifest_dir(&a.manifest);
    let data = match stage {
        Stage::Pretrain => manifest.load_split(Kind::Synthetic, Split::Train, dir)?,
        Stage::Finetune => {
            let mut real = manifest.load_split(Kind::Real, Split::Train, dir)?;
            if mixed {
                real.extend(manifest.load_split(Kind::Synthetic, Split::Train, dir)?);
            }
            real
        }
    };
    if data.is_empty() {
        return Err(Error::EmptySplit(format!("{name} training data")));
    }
    let val = manifest.load_split(Kind::Real, Split::Val, dir)?;
    let model = initial_model(a.init.as_deref(), hidden, cfg.seed)?;
    let (model, log) = train_standard(&model, &data, &val, &cfg, name)?;
    save_checkpoint(&model, &a.out, "model")?;
    write_text(&a.out.join("train_log.csv"), &log_csv(&log))?;
    info!("stage {name} done: {} samples, {} epochs", data.len(), cfg.epochs);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn posttrain_cmd(a: PosttrainArgs, file: &RunConfig) -> Result<()> {
    let seed = pick(a.seed, file.seed, 0);
    let sched = KDSchedule {
        k: pick(a.k, file.k, 5),
        epochs: pick(a.epochs, file.epochs, 50),
        drop_policy: DropPolicy::RemoveOneUniform,
        lr: pick(a.lr, file.lr, DEFAULT_LR),
        batch_size: a.batch_size.or(file.batch_size),
        loss: pick(a.loss, file.loss, LossArg::CrossEntropy).into(),
        distill_predictions: pick_bool(a.distill_predictions, file.distill_predictions),
        ..KDSchedule::default()
    };
    log_resolved(
        "posttrain",
        &serde_json::json!({ "manifest": a.manifest, "out": a.out, "init": a.init, "seed": seed, "schedule": sched }),
        Some(&a.out),
    )?;
    let manifest = Manifest::load(&a.manifest)?;
    let dir = manifest_dir(&a.manifest);
    let data = manifest.load_split(Kind::Real, Split::Train, dir)?;
    let val = manifest.load_split(Kind::Real, Split::Val, dir)?;
    let model = load_checkpoint(&a.init)?;
    let out = post_train(&model, &data, &val, &sched, seed)?;
    save_checkpoint(&out.student, &a.out, "model")?;
    for (epoch, teacher) in &out.refreshes {
        save_checkpoint(teacher, &a.out.join("teachers"), &format!("teacher_e{epoch:04}"))?;
    }
    write_text(&a.out.join("train_log.csv"), &log_csv(&out.log))?;
    info!("post-training done: {} epochs, {} teacher refreshes", sched.epochs, out.refreshes.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.as_deref().unwrap_or("test").parse()?;
    log_resolved("eval", &serde_json::json!({ "model": a.model, "manifest": a.manifest, "split": split, "out": a.out }), None)?;
    let model = load_checkpoint(&a.model)?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples = manifest.load_split(Kind::Real, split, manifest_dir(&a.manifest))?;
    let report = evaluate_all(&model, &samples)?;
    let csv = report.to_csv();
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let (image, labels) = io::load_sample_dir(&a.sample)?;
    println!("dims: {}", image.dims());
    let avail: Vec<String> = Modality::ALL
        .iter()
        .map(|m| format!("{}={}", m.short(), if image.get(*m).is_some() { "yes" } else { "no" }))
        .collect();
    println!("availability: {}", avail.join(" "));
    match labels {
        Some(y) => {
            let h = y.histogram();
            println!("labels: 0={} 1={} 2={} 4={}", h[0], h[1], h[2], h[3]);
        }
        None => println!("labels: none"),
    }
    if let Ok(c) = Combination::from_mask(image.availability()) {
        println!("combination: {c}");
    }
    Ok(())
}

fn phantom_cmd(a: PhantomArgs, file: &RunConfig) -> Result<()> {
    let n = pick(a.n, file.n, 20);
    let size = pick(a.size, file.size, 16);
    let seed = pick(a.seed, file.seed, 0);
    if size < 8 {
        return Err(Error::InvalidConfig("phantom size must be at least 8".into()));
    }
    log_resolved("phantom", &serde_json::json!({ "out": a.out, "n": n, "size": size, "seed": seed }), None)?;
    for s in cohort(n, Dims::cube(size), seed) {
        io::save_sample(&a.out.join(&s.id), &s.image, Some(&s.labels))?;
    }
    info!("wrote {n} phantom samples to {}", a.out.display());
    Ok(())
}
