//! Training loops: pretext pretraining and head fine-tuning, with
//! checkpointing on the best validation loss.

mod advise;
mod eval;

use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_iterator, derive_seed, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::network::{build_backbone, ArchProfile, HeadKind, Network};
use crate::ops;
use crate::optim::{OptimizerKind, OptimizerOverrides, OptimizerState};
use crate::tensor::Tensor;

pub use advise::{advise, extract_features, fit_linear, linear_probe, Advice, DatasetSize, LinearProbe, Similarity, Strategy};
pub use eval::{argmax, evaluate, predict, write_csv_report, write_json_report, Evaluation, PredictionRecord};

/// Parameters matching this glob are frozen by default during fine-tuning:
/// every parameter of the convolutional blocks.
pub const DEFAULT_FREEZE: &str = "block*";

/// How many optimizer steps make up one training epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsMode {
    /// `floor(n_ti / b_size)` steps.
    #[default]
    TrainCount,
    /// `floor(n_vi / b_size)` steps, the count the original listing passes
    /// to its training call.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_ti: usize,
    pub n_vi: usize,
    pub b_size: usize,
    pub epochs: usize,
    /// `None` selects the stage default: Adagrad for pretraining, momentum
    /// SGD for fine-tuning.
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub eps: Option<f64>,
    pub seed: u64,
    /// Glob over parameter names frozen by [`fine_tune`]. Pretraining
    /// always trains every parameter.
    pub freeze_pattern: Option<String>,
    pub steps_per_epoch_mode: StepsMode,
    /// Applied to training batches only.
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_ti: 500,
            n_vi: 300,
            b_size: 10,
            epochs: 25,
            optimizer: None,
            lr: None,
            momentum: None,
            eps: None,
            seed: 0,
            freeze_pattern: Some(DEFAULT_FREEZE.to_string()),
            steps_per_epoch_mode: StepsMode::TrainCount,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_size == 0 {
            return Err(Error::InvalidConfig("b_size must be at least 1".into()));
        }
        if self.n_ti < self.b_size {
            return Err(Error::InvalidConfig(format!(
                "n_ti {} is smaller than b_size {}",
                self.n_ti, self.b_size
            )));
        }
        if self.n_vi < self.b_size {
            return Err(Error::InvalidConfig(format!(
                "n_vi {} is smaller than b_size {}",
                self.n_vi, self.b_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        self.augment.validate()
    }

    /// Training batches per epoch in `train_count` mode.
    pub fn sepoch(&self) -> usize {
        self.n_ti / self.b_size
    }

    /// Validation batches per epoch.
    pub fn v_step(&self) -> usize {
        self.n_vi / self.b_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.steps_per_epoch_mode {
            StepsMode::TrainCount => self.sepoch(),
            StepsMode::PaperLiteral => self.v_step(),
        }
    }

    pub fn overrides(&self) -> OptimizerOverrides {
        OptimizerOverrides {
            lr: self.lr,
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    fn optimizer_or(&self, stage_default: OptimizerKind) -> OptimizerState {
        OptimizerState::new(self.optimizer.unwrap_or(stage_default), self.overrides())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub checkpoint_written: bool,
    /// Seconds. The only field that varies between identical runs.
    pub wall_time: f64,
}

/// Validation metrics of the untrained network, measured before the first
/// step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Result of a training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    /// Snapshot taken at the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub best_val_loss: f64,
    pub baseline: Baseline,
    pub reports: Vec<EpochReport>,
}

/// Which stage a checkpoint came from; recorded under the `stage` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Checkpoint metadata keys.
pub mod meta {
    pub const STAGE: &str = "stage";
    pub const VAL_LOSS: &str = "val_loss";
    pub const EPOCH: &str = "epoch";
    pub const SEED: &str = "seed";
    /// JSON-encoded [`crate::ArchProfile`] of the backbone.
    pub const PROFILE: &str = "profile";
    /// JSON array of class names, in label order.
    pub const CLASS_NAMES: &str = "class_names";
}

/// Rebuilds the network a stage checkpoint was taken from (backbone from
/// the recorded profile plus a head sized to the recorded classes) and loads
/// it strictly. Returns the network and its class names.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<(Network, Vec<String>)> {
    let field = |key: &str| {
        ckpt.meta
            .get(key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("metadata key `{key}` missing")))
    };
    let profile: ArchProfile = serde_json::from_str(field(meta::PROFILE)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("profile metadata: {e}")))?;
    let classes: Vec<String> = serde_json::from_str(field(meta::CLASS_NAMES)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("class_names metadata: {e}")))?;
    let mut net = build_backbone(&profile.with_head(HeadKind::None), 0)?;
    net.graft_head(classes.len(), 0)?;
    net.apply_checkpoint(ckpt, true)?;
    Ok((net, classes))
}

/// Pretrains from random initialisation. See [`pretrain_with`].
pub fn pretrain(cfg: &TrainConfig, train: &Dataset, val: &Dataset, profile: &ArchProfile) -> Result<TrainRun> {
    pretrain_with(cfg, train, val, profile, None, &mut |_| {})
}

/// Builds a randomly initialised backbone, grafts a head for the pretext
/// classes and trains every parameter (Adagrad unless overridden). `resume`
/// optionally loads matching tensors before training. `on_epoch` sees each
/// report as it is produced.
pub fn pretrain_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    profile: &ArchProfile,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainRun> {
    let profile = profile.clone().with_head(HeadKind::None);
    check_datasets(train, val, &profile)?;
    let mut net = build_backbone(&profile, derive_seed(&[cfg.seed, 10]))?;
    net.graft_head(train.num_classes(), derive_seed(&[cfg.seed, 11]))?;
    if let Some(ckpt) = resume {
        net.apply_checkpoint(ckpt, false)?;
    }
    let opt = cfg.optimizer_or(OptimizerKind::Adagrad);
    run_stage(Stage::Pretrain, cfg, net, opt, train, val, &profile, on_epoch)
}

/// Fine-tunes from pretrained backbone weights. See [`fine_tune_with`].
pub fn fine_tune(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    pretrained: &Checkpoint,
    profile: &ArchProfile,
) -> Result<TrainRun> {
    fine_tune_with(cfg, train, val, pretrained, profile, &mut |_| {})
}

/// Builds the backbone, loads every backbone tensor from `pretrained`,
/// grafts a fresh head for the target classes, freezes
/// `cfg.freeze_pattern` and trains (momentum SGD unless overridden).
pub fn fine_tune_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    pretrained: &Checkpoint,
    profile: &ArchProfile,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainRun> {
    let profile = profile.clone().with_head(HeadKind::None);
    check_datasets(train, val, &profile)?;
    let mut net = build_backbone(&profile, derive_seed(&[cfg.seed, 10]))?;
    // Only backbone tensors are taken; a pretext head of another width must
    // not collide with the fresh one.
    let backbone = Checkpoint {
        tensors: net
            .params()
            .keys()
            .map(|name| {
                pretrained
                    .tensors
                    .get(name)
                    .map(|t| (name.clone(), t.clone()))
                    .ok_or_else(|| Error::MissingTensor(name.clone()))
            })
            .collect::<Result<_>>()?,
        meta: IndexMap::new(),
    };
    net.apply_checkpoint(&backbone, true)?;
    net.graft_head(train.num_classes(), derive_seed(&[cfg.seed, 11]))?;
    if let Some(pattern) = &cfg.freeze_pattern {
        net.set_trainable(pattern, false)?;
    }
    let opt = cfg.optimizer_or(OptimizerKind::SgdMomentum);
    run_stage(Stage::Finetune, cfg, net, opt, train, val, &profile, on_epoch)
}

fn check_datasets(train: &Dataset, val: &Dataset, profile: &ArchProfile) -> Result<()> {
    for ds in [train, val] {
        let shape = ds
            .image_shape()
            .ok_or_else(|| Error::InvalidConfig("dataset is empty".into()))?;
        if shape != profile.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "dataset images are {shape:?}, profile expects {:?}",
                profile.input_shape
            )));
        }
    }
    if val.num_classes() != train.num_classes() {
        return Err(Error::ClassCountMismatch {
            network: train.num_classes(),
            dataset: val.num_classes(),
        });
    }
    Ok(())
}

/// Fraction of rows whose argmax matches the one-hot label.
fn batch_hits(probs: &Tensor<f32>, labels: &Tensor<f32>) -> usize {
    let classes = *probs.shape().last().expect("rank 2");
    probs
        .data()
        .chunks(classes)
        .zip(labels.data().chunks(classes))
        .filter(|(p, l)| argmax(p) == argmax(l))
        .count()
}

/// Mean batch loss and accuracy over the first `v_step` validation batches,
/// in dataset order without augmentation.
fn validate(net: &Network, val: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let steps = cfg.v_step();
    let mut loss = 0.0;
    let mut hits = 0;
    for batch in batch_iterator(val, cfg.b_size, false, cfg.seed, 0, AugmentPolicy::disabled())?.take(steps) {
        let batch = batch?;
        let probs = net.forward_eval(&batch.images)?;
        loss += ops::cross_entropy(&probs, &batch.labels)? as f64;
        hits += batch_hits(&probs, &batch.labels);
    }
    Ok((loss / steps as f64, hits as f64 / (steps * cfg.b_size) as f64))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: Stage,
    cfg: &TrainConfig,
    mut net: Network,
    mut opt: OptimizerState,
    train: &Dataset,
    val: &Dataset,
    profile: &ArchProfile,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainRun> {
    cfg.validate()?;
    let steps = cfg.steps_per_epoch();
    if steps > train.len() / cfg.b_size {
        return Err(Error::InvalidConfig(format!(
            "{steps} training batches of {} need more than the {} training images",
            cfg.b_size,
            train.len()
        )));
    }
    if cfg.v_step() > val.len() / cfg.b_size {
        return Err(Error::InvalidConfig(format!(
            "n_vi {} exceeds the {} validation images",
            cfg.n_vi,
            val.len()
        )));
    }
    let (val_loss, val_accuracy) = validate(&net, val, cfg)?;
    let baseline = Baseline { val_loss, val_accuracy };

    let policy = cfg.augment;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut hits = 0;
        let batches = batch_iterator(train, cfg.b_size, true, cfg.seed, epoch as u64, policy)?;
        for (step, batch) in batches.take(steps).enumerate() {
            let batch = batch?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 2, step as u64]));
            let mut pass = net.forward_train(&batch.images, &mut rng)?;
            hits += batch_hits(pass.tape.value(pass.output)?, &batch.labels);
            let loss = pass.tape.cross_entropy(pass.output, batch.labels)?;
            loss_sum += pass.tape.value(loss)?.data()[0] as f64;
            let grads = pass.tape.backward(loss)?.into_named();
            opt.step(&mut net, &grads)?;
        }
        let (val_loss, val_accuracy) = validate(&net, val, cfg)?;
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            let meta = IndexMap::from([
                (meta::STAGE.to_string(), stage.as_str().to_string()),
                (meta::VAL_LOSS.to_string(), val_loss.to_string()),
                (meta::EPOCH.to_string(), epoch.to_string()),
                (meta::SEED.to_string(), cfg.seed.to_string()),
                (meta::PROFILE.to_string(), serde_json::to_string(profile).expect("plain data")),
                (
                    meta::CLASS_NAMES.to_string(),
                    serde_json::to_string(&train.class_names).expect("plain data"),
                ),
            ]);
            best = Some((val_loss, net.to_checkpoint(meta)));
        }
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_accuracy: hits as f64 / (steps * cfg.b_size) as f64,
            val_loss,
            val_accuracy,
            checkpoint_written: improved,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    let (best_val_loss, checkpoint) = best.expect("at least one epoch");
    Ok(TrainRun {
        checkpoint,
        best_val_loss,
        baseline,
        reports,
    })
}
