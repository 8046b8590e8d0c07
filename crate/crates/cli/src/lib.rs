//! Argument parsing and verb dispatch for the `deeptransfer` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 unknown verb or other usage
//! error, 3 missing required flag, 4 malformed config.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use deeptransfer::data::synthetic::generate_synthetic;
use deeptransfer::data::{decode_ppm, load_dataset, AugmentPolicy, SyntheticSpec};
use deeptransfer::optim::OptimizerKind;
use deeptransfer::train::{
    self, advise, evaluate, fine_tune_with, network_from_checkpoint, predict, pretrain_with, write_csv_report,
    write_json_report, DatasetSize, Similarity, StepsMode, TrainConfig, TrainRun,
};
use deeptransfer::{build_backbone, ArchProfile, Checkpoint, HeadKind, Network};
use indexmap::IndexMap;
use serde::Serialize;
use serde_json::json;

pub use config::{merge, read_config};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    UnknownVerb(String),
    #[error("{0}")]
    MissingFlag(String),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl From<deeptransfer::Error> for CliError {
    fn from(e: deeptransfer::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) | CliError::UnknownVerb(_) => 2,
            CliError::MissingFlag(_) => 3,
            CliError::Config(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deeptransfer", about = "Pretrain, fine-tune and evaluate VGG-style transfer networks")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 224x224 input, blocks 2-2-4-4-5.
    Paper,
    /// Canonical VGG19 blocks 2-2-4-4-4.
    Vgg19,
    /// 32x32 input, a quarter of the filters.
    Scaled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SizeArg {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Similar,
    Different,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StepsArg {
    TrainCount,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    SgdMomentum,
    Adagrad,
}

/// Options shared by the training verbs. Unset flags fall back to the
/// config file, then to the defaults.
#[derive(Debug, Clone, Args)]
struct TrainFlags {
    /// JSON document with TrainConfig, ArchProfile or AugmentPolicy keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base architecture that config keys refine.
    #[arg(long, value_enum)]
    profile: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    b_size: Option<usize>,
    #[arg(long)]
    n_ti: Option<usize>,
    #[arg(long)]
    n_vi: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Glob over parameter names to freeze during fine-tuning.
    #[arg(long, conflicts_with = "no_freeze")]
    freeze: Option<String>,
    /// Train every parameter during fine-tuning.
    #[arg(long)]
    no_freeze: bool,
    #[arg(long, value_enum)]
    steps_mode: Option<StepsArg>,
    /// Disable training-time augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a seeded synthetic dataset as <out>/<class>/<n>.ppm.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// JSON SyntheticSpec; individual flags override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        similarity: Option<f64>,
        /// Index of the first image per class. A validation set drawn with
        /// the same seed and a later first index shares the classes.
        #[arg(long)]
        first_index: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train backbone and head from random initialisation on a pretext task.
    Pretrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Where the best checkpoint is written.
        #[arg(long, default_value = "pretrain.ftw")]
        save: PathBuf,
        /// Load matching tensors from this checkpoint before training.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Graft a fresh head onto pretrained blocks, freeze them and train.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "finetune.ftw")]
        save: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Accuracy, loss, confusion matrix and per-image records.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file; `.csv` selects CSV, anything else JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify individual PPM images.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Truncate the top of a checkpointed network and/or graft a new head.
    Surgery {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        save: PathBuf,
        /// Drop every layer after the last convolutional block.
        #[arg(long)]
        truncate_top: bool,
        /// Graft a fresh head with this many classes.
        #[arg(long)]
        graft: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Architecture of checkpoints that do not record one.
        #[arg(long, value_enum)]
        profile: Option<Preset>,
    },
    /// Recommend a transfer strategy.
    Advise {
        #[arg(long, value_enum)]
        size: SizeArg,
        #[arg(long, value_enum)]
        similarity: SimilarityArg,
    },
    /// Print the version.
    Version,
}

/// Training verb settings after defaults, config file and flags are merged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub train: TrainConfig,
    pub profile: ArchProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SynthData {
        out: PathBuf,
        spec: SyntheticSpec,
        seed: u64,
    },
    Pretrain {
        train: PathBuf,
        val: PathBuf,
        save: PathBuf,
        resume: Option<PathBuf>,
        resolved: Resolved,
    },
    Finetune {
        train: PathBuf,
        val: PathBuf,
        weights: PathBuf,
        save: PathBuf,
        resolved: Resolved,
    },
    Evaluate {
        weights: PathBuf,
        data: PathBuf,
        out: Option<PathBuf>,
    },
    Predict {
        weights: PathBuf,
        images: Vec<PathBuf>,
        out: Option<PathBuf>,
    },
    Surgery {
        weights: PathBuf,
        save: PathBuf,
        truncate_top: bool,
        graft: Option<usize>,
        seed: u64,
        profile: Option<ArchProfile>,
    },
    Advise {
        size: DatasetSize,
        similarity: Similarity,
    },
    Version,
    /// `--help` output; printed and exits 0.
    Help(String),
}

fn preset(p: Preset) -> ArchProfile {
    match p {
        Preset::Paper => ArchProfile::default(),
        Preset::Vgg19 => ArchProfile::vgg19(),
        Preset::Scaled => ArchProfile::scaled(),
    }
}

fn resolve(flags: &TrainFlags) -> Result<Resolved, CliError> {
    let base_profile = flags.profile.map(preset).unwrap_or_default();
    let (mut t, profile) = match &flags.config {
        Some(path) => merge(&read_config(path)?, &TrainConfig::default(), &base_profile)?,
        None => (TrainConfig::default(), base_profile),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = flags.$field { t.$field = v; })* };
    }
    set!(epochs, b_size, n_ti, n_vi, seed);
    for (dst, src) in [(&mut t.lr, flags.lr), (&mut t.momentum, flags.momentum), (&mut t.eps, flags.eps)] {
        if src.is_some() {
            *dst = src;
        }
    }
    if let Some(o) = flags.optimizer {
        t.optimizer = Some(match o {
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerArg::Adagrad => OptimizerKind::Adagrad,
        });
    }
    if let Some(p) = &flags.freeze {
        t.freeze_pattern = Some(p.clone());
    }
    if flags.no_freeze {
        t.freeze_pattern = None;
    }
    if let Some(s) = flags.steps_mode {
        t.steps_per_epoch_mode = match s {
            StepsArg::TrainCount => StepsMode::TrainCount,
            StepsArg::PaperLiteral => StepsMode::PaperLiteral,
        };
    }
    if flags.no_augment {
        t.augment = AugmentPolicy::disabled();
    }
    Ok(Resolved { train: t, profile })
}

fn synth_spec(
    path: Option<&Path>,
    classes: Option<usize>,
    per_class: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    similarity: Option<f64>,
    first_index: Option<usize>,
) -> Result<SyntheticSpec, CliError> {
    let mut spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec {
            classes: 2,
            per_class: 100,
            size: [32, 32],
            similarity: 0.5,
            first_index: 0,
        },
    };
    spec.classes = classes.unwrap_or(spec.classes);
    spec.per_class = per_class.unwrap_or(spec.per_class);
    spec.size = [height.unwrap_or(spec.size[0]), width.unwrap_or(spec.size[1])];
    spec.similarity = similarity.unwrap_or(spec.similarity);
    spec.first_index = first_index.unwrap_or(spec.first_index);
    Ok(spec)
}

/// Parses `argv` (without the program name). Reads nothing but the named
/// config or spec file.
pub fn parse_command<I, S>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once("deeptransfer".into()).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return Err(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::DisplayVersion => {
                    return Ok(Command::Help(text))
                }
                ErrorKind::InvalidSubcommand => CliError::UnknownVerb(text),
                ErrorKind::MissingRequiredArgument => CliError::MissingFlag(text),
                _ => CliError::Usage(text),
            });
        }
    };
    Ok(match cli.verb {
        Verb::SynthData {
            out,
            spec,
            classes,
            per_class,
            height,
            width,
            similarity,
            first_index,
            seed,
        } => Command::SynthData {
            out,
            spec: synth_spec(spec.as_deref(), classes, per_class, height, width, similarity, first_index)?,
            seed,
        },
        Verb::Pretrain {
            train,
            val,
            save,
            resume,
            flags,
        } => Command::Pretrain {
            train,
            val,
            save,
            resume,
            resolved: resolve(&flags)?,
        },
        Verb::Finetune {
            train,
            val,
            weights,
            save,
            flags,
        } => Command::Finetune {
            train,
            val,
            weights,
            save,
            resolved: resolve(&flags)?,
        },
        Verb::Evaluate { weights, data, out } => Command::Evaluate { weights, data, out },
        Verb::Predict { weights, image, out } => Command::Predict {
            weights,
            images: image,
            out,
        },
        Verb::Surgery {
            weights,
            save,
            truncate_top,
            graft,
            seed,
            profile,
        } => Command::Surgery {
            weights,
            save,
            truncate_top,
            graft,
            seed,
            profile: profile.map(preset),
        },
        Verb::Advise { size, similarity } => Command::Advise {
            size: match size {
                SizeArg::Small => DatasetSize::Small,
                SizeArg::Large => DatasetSize::Large,
            },
            similarity: match similarity {
                SimilarityArg::Similar => Similarity::Similar,
                SimilarityArg::Different => Similarity::Different,
            },
        },
        Verb::Version => Command::Version,
    })
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn load_split(dir: &Path, profile: &ArchProfile) -> anyhow::Result<deeptransfer::data::Dataset> {
    let [h, w, _] = profile.input_shape;
    let ds = load_dataset(dir, h, w).with_context(|| format!("loading {}", dir.display()))?;
    for warning in &ds.warnings {
        eprintln!("warning: {}: {warning}", dir.display());
    }
    Ok(ds)
}

fn finish_training(out: &mut dyn Write, run: &TrainRun, save: &Path) -> anyhow::Result<()> {
    run.checkpoint
        .save(save)
        .with_context(|| format!("writing {}", save.display()))?;
    emit(
        out,
        &json!({"saved": save, "best_val_loss": run.best_val_loss, "epochs": run.reports.len()}),
    )
}

fn write_report(path: &Path, eval: &train::Evaluation) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_csv_report(path, &eval.records)?;
    } else {
        write_json_report(path, eval)?;
    }
    Ok(())
}

/// Rebuilds whatever network a checkpoint holds: stage checkpoints carry
/// their profile; otherwise `fallback` is used and the head is inferred
/// from the tensor names.
fn surgery_network(ckpt: &Checkpoint, fallback: Option<ArchProfile>) -> anyhow::Result<Network> {
    if fallback.is_none() && ckpt.meta.contains_key(train::meta::PROFILE) {
        if ckpt.tensors.contains_key("head_dense/kernel") {
            return Ok(network_from_checkpoint(ckpt)?.0);
        }
        let profile: ArchProfile = serde_json::from_str(&ckpt.meta[train::meta::PROFILE])?;
        return surgery_network(ckpt, Some(profile));
    }
    let mut profile = fallback.unwrap_or_default();
    profile.head = if ckpt.tensors.contains_key("predictions/kernel") {
        HeadKind::ImagenetTop
    } else {
        HeadKind::None
    };
    let mut net = build_backbone(&profile, 0)?;
    if let Some(k) = ckpt.tensors.get("head_dense/kernel") {
        net.graft_head(k.shape()[1], 0)?;
    }
    net.apply_checkpoint(ckpt, true)?;
    Ok(net)
}

/// Runs a parsed command, writing JSON lines to `out`.
pub fn run_command(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Help(text) => write!(out, "{text}").context("writing help")?,
        Command::Version => writeln!(out, "deeptransfer {VERSION}").context("writing version")?,
        Command::Advise { size, similarity } => emit(out, &advise(size, similarity))?,
        Command::SynthData { out: dir, spec, seed } => {
            emit(out, &json!({"verb": "synth-data", "out": dir, "spec": spec, "seed": seed}))?;
            generate_synthetic(&spec, seed, &dir).with_context(|| format!("writing {}", dir.display()))?;
            emit(out, &json!({"written": spec.classes * spec.per_class}))?;
        }
        Command::Pretrain {
            train,
            val,
            save,
            resume,
            resolved,
        } => {
            emit(
                out,
                &json!({"verb": "pretrain", "train": train, "val": val, "save": save, "resume": resume,
                        "config": resolved.train, "profile": resolved.profile}),
            )?;
            let train_ds = load_split(&train, &resolved.profile)?;
            let val_ds = load_split(&val, &resolved.profile)?;
            let resume = resume
                .map(|p| Checkpoint::load(&p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let mut failed = None;
            let run = pretrain_with(
                &resolved.train,
                &train_ds,
                &val_ds,
                &resolved.profile,
                resume.as_ref(),
                &mut |r| {
                    if let Err(e) = emit(out, r) {
                        failed.get_or_insert(e);
                    }
                },
            )
            .context("pretraining")?;
            if let Some(e) = failed {
                return Err(e.into());
            }
            finish_training(out, &run, &save)?;
        }
        Command::Finetune {
            train,
            val,
            weights,
            save,
            resolved,
        } => {
            emit(
                out,
                &json!({"verb": "finetune", "train": train, "val": val, "weights": weights, "save": save,
                        "config": resolved.train, "profile": resolved.profile}),
            )?;
            let pretrained = Checkpoint::load(&weights).with_context(|| format!("reading {}", weights.display()))?;
            let train_ds = load_split(&train, &resolved.profile)?;
            let val_ds = load_split(&val, &resolved.profile)?;
            let mut failed = None;
            let run = fine_tune_with(
                &resolved.train,
                &train_ds,
                &val_ds,
                &pretrained,
                &resolved.profile,
                &mut |r| {
                    if let Err(e) = emit(out, r) {
                        failed.get_or_insert(e);
                    }
                },
            )
            .context("fine-tuning")?;
            if let Some(e) = failed {
                return Err(e.into());
            }
            finish_training(out, &run, &save)?;
        }
        Command::Evaluate { weights, data, out: report } => {
            let ckpt = Checkpoint::load(&weights).with_context(|| format!("reading {}", weights.display()))?;
            let (net, classes) = network_from_checkpoint(&ckpt).with_context(|| weights.display().to_string())?;
            let [h, w, _] = net.input_shape();
            let ds = load_dataset(&data, h, w).with_context(|| format!("loading {}", data.display()))?;
            if ds.class_names != classes {
                eprintln!(
                    "warning: dataset classes {:?} differ from checkpoint classes {:?}; matching by label index",
                    ds.class_names, classes
                );
            }
            let eval = evaluate(&net, &ds)?;
            if let Some(path) = &report {
                write_report(path, &eval).with_context(|| format!("writing {}", path.display()))?;
            }
            emit(
                out,
                &json!({"accuracy": eval.accuracy, "mean_loss": eval.mean_loss, "confusion": eval.confusion,
                        "images": ds.len(), "report": report}),
            )?;
        }
        Command::Predict {
            weights,
            images,
            out: report,
        } => {
            let ckpt = Checkpoint::load(&weights).with_context(|| format!("reading {}", weights.display()))?;
            let (net, classes) = network_from_checkpoint(&ckpt).with_context(|| weights.display().to_string())?;
            let mut records = Vec::new();
            for path in &images {
                let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                let image = decode_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))?;
                let rec = predict(&net, &path.display().to_string(), &image, &classes)
                    .with_context(|| format!("classifying {}", path.display()))?;
                emit(out, &rec)?;
                records.push(rec);
            }
            if let Some(path) = &report {
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    write_csv_report(path, &records)?;
                } else {
                    write_json_report(path, &records)?;
                }
            }
        }
        Command::Surgery {
            weights,
            save,
            truncate_top,
            graft,
            seed,
            profile,
        } => {
            let ckpt = Checkpoint::load(&weights).with_context(|| format!("reading {}", weights.display()))?;
            let mut net = surgery_network(&ckpt, profile.clone())?;
            let before = net.params().len();
            if truncate_top {
                net.truncate_top();
            }
            let mut meta = IndexMap::new();
            if let Some(classes) = graft {
                if !truncate_top {
                    net.truncate_top();
                }
                net.graft_head(classes, seed)?;
                let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
                meta.insert(train::meta::CLASS_NAMES.to_string(), serde_json::to_string(&names).context("names")?);
            }
            let recorded = match (&profile, ckpt.meta.get(train::meta::PROFILE)) {
                (Some(p), _) => serde_json::to_string(p).context("profile")?,
                (None, Some(p)) => p.clone(),
                (None, None) => serde_json::to_string(&ArchProfile::default()).context("profile")?,
            };
            meta.insert(train::meta::PROFILE.to_string(), recorded);
            meta.insert(train::meta::STAGE.to_string(), "surgery".to_string());
            net.to_checkpoint(meta)
                .save(&save)
                .with_context(|| format!("writing {}", save.display()))?;
            emit(
                out,
                &json!({"saved": save, "parameters_before": before, "parameters_after": net.params().len(),
                        "layers": net.layers().iter().map(|l| l.name.as_str()).collect::<Vec<_>>(),
                        "output_shape": net.output_shape()}),
            )?;
        }
    }
    Ok(())
}

/// Parses and runs; returns the process exit code. Diagnostics go to
/// standard error as a single line.
pub fn main_with_args<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let result = parse_command(argv).and_then(|cmd| run_command(cmd, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            match e {
                // clap's own rendering already explains usage errors.
                CliError::Usage(t) | CliError::UnknownVerb(t) | CliError::MissingFlag(t) => eprint!("{t}"),
                other => eprintln!("error: {}", other.to_string().replace('\n', " ")),
            }
            code
        }
    }
}
