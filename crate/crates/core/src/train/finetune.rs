//! Downstream fine-tuning with an MLP head, per cross-validation fold.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, OptimizerMeta, Stage};
use super::model::{Example, Head, HeadSpec, Model, Projector};
use super::optim::AdamW;
use super::{output_transform, target_vector, task_loss, HistoryRecord};
use crate::error::{Error, Result};
use crate::eval::report::{score, Prediction};
use crate::preprocess::Window;
use crate::rng::{derive_seed, rng_from};
use crate::signal_io::{SplitPlan, TaskKind};
use crate::ssm::Backbone;

/// Learning rates a fine-tuning run may use.
pub const LEARNING_RATE_GRID: [f64; 3] = [1e-4, 5e-4, 1e-3];

/// Training sets smaller than this use the small-dataset batch size.
pub const SMALL_DATASET_WINDOWS: usize = 1000;
pub const SMALL_BATCH_SIZE: usize = 32;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Every parameter is trained.
    FullModel,
    /// Encoder and blocks frozen; decoder and head trained.
    Projector,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_model" | "full-model" => Ok(FinetuneMode::FullModel),
            "projector" => Ok(FinetuneMode::Projector),
            other => Err(Error::InvalidArgument(format!("unknown fine-tuning mode {other:?}"))),
        }
    }
}

/// Which validation quantity picks the restored parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValidationLoss,
    /// F1-macro for classification tasks, CCC for regression.
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub task: String,
    /// Checked against the dataset schema when given.
    pub kind: Option<TaskKind>,
    pub head_hidden_dim: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// `None` picks 256, or 32 below `SMALL_DATASET_WINDOWS` training windows.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of each fold's training windows kept.
    pub fraction: f64,
    pub selection: Selection,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::FullModel,
            task: String::new(),
            kind: None,
            head_hidden_dim: 128,
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: None,
            weight_decay: 0.01,
            seed: 0,
            fraction: 1.0,
            selection: Selection::ValidationLoss,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.task.is_empty() {
            return bad("task name is required".into());
        }
        if !LEARNING_RATE_GRID.iter().any(|&g| (g - self.learning_rate).abs() < 1e-12) {
            return bad(format!(
                "learning_rate {} is not one of {LEARNING_RATE_GRID:?}",
                self.learning_rate
            ));
        }
        if self.head_hidden_dim == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("head_hidden_dim, max_epochs and patience must be >= 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub fraction: f64,
    pub total: usize,
    pub kept: usize,
    /// Classes whose proportional share rounded to zero and were kept at one.
    pub raised_to_one: Vec<usize>,
}

/// Indices of a reduced training set. When every entry has a class the
/// sample is stratified per class (at least one each), otherwise uniform.
pub fn subsample_training(classes: &[Option<usize>], fraction: f64, seed: u64) -> Result<(Vec<usize>, SubsampleReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let total = classes.len();
    let mut raised = Vec::new();
    let mut keep: Vec<usize> = if classes.iter().all(Option::is_some) {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            by_class.entry(c.expect("checked")).or_default().push(i);
        }
        let mut out = Vec::new();
        for (c, idx) in by_class {
            let mut want = (idx.len() as f64 * fraction).round() as usize;
            if want == 0 {
                want = 1;
                raised.push(c);
            }
            let picked = rand::seq::index::sample(&mut rng_from(seed, &[c as u64]), idx.len(), want);
            out.extend(picked.into_iter().map(|k| idx[k]));
        }
        out
    } else {
        let want = ((total as f64 * fraction).round() as usize).clamp(total.min(1), total);
        rand::seq::index::sample(&mut rng_from(seed, &[u64::MAX]), total, want).into_vec()
    };
    keep.sort_unstable();
    let report = SubsampleReport {
        fraction,
        total,
        kept: keep.len(),
        raised_to_one: raised,
    };
    Ok((keep, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub predictions: Vec<Prediction>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub subsample: SubsampleReport,
}

fn primary_metric(kind: &TaskKind) -> &'static str {
    match kind {
        TaskKind::Regression { .. } => "ccc",
        _ => "f1_macro",
    }
}

struct Split<'a> {
    windows: Vec<&'a Window>,
    targets: Vec<Vec<f64>>,
}

fn split<'a>(windows: &'a [Window], ids: &[String], task: &str, kind: &TaskKind) -> Result<Split<'a>> {
    let ids: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let windows: Vec<&Window> = windows.iter().filter(|w| ids.contains(w.record_id.as_str())).collect();
    let targets = windows
        .iter()
        .map(|w| {
            let label = w
                .labels
                .get(task)
                .ok_or_else(|| Error::Task(format!("{}: no label {task:?}", w.record_id)))?;
            target_vector(kind, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { windows, targets })
}

fn predictions(fold: usize, task: &str, kind: &TaskKind, s: &Split<'_>, outputs: &[Vec<f64>]) -> Vec<Prediction> {
    s.windows
        .iter()
        .zip(outputs)
        .map(|(w, o)| Prediction {
            fold,
            record_id: w.record_id.clone(),
            subject_id: w.subject_id.clone(),
            target: w.labels[task].clone(),
            output: output_transform(kind, o),
        })
        .collect()
}

/// Mean loss and selection metric of raw outputs against a split.
fn assess(fold: usize, task: &str, kind: &TaskKind, s: &Split<'_>, outputs: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    for (o, t) in outputs.iter().zip(&s.targets) {
        loss += task_loss(kind, o, t)?.0;
    }
    let preds = predictions(fold, task, kind, s, outputs);
    let metric = score(kind, &preds.iter().collect::<Vec<_>>())?
        .get(primary_metric(kind))
        .copied()
        .unwrap_or(f64::NAN);
    Ok((loss / outputs.len() as f64, metric))
}

/// Fine-tunes `init` on every fold of `plan` and returns per-fold results
/// with test-set predictions.
pub fn finetune(
    init: &Backbone,
    windows: &[Window],
    plan: &SplitPlan,
    kind: &TaskKind,
    config: &FinetuneConfig,
    mut progress: impl FnMut(&HistoryRecord),
) -> Result<Vec<FoldResult>> {
    config.validate()?;
    if let Some(k) = &config.kind {
        if k != kind {
            return Err(Error::Task(format!(
                "task {:?} is {kind:?} in the dataset schema, config says {k:?}",
                config.task
            )));
        }
    }
    if init.config.window_len == 0 || windows.iter().any(|w| w.values.len() != init.config.window_len) {
        return Err(Error::Shape(format!(
            "windows must have {} samples to match the backbone",
            init.config.window_len
        )));
    }
    plan.folds
        .iter()
        .enumerate()
        .map(|(f, fold)| run_fold(init, windows, f, fold, kind, config, &mut progress))
        .collect()
}

fn run_fold(
    init: &Backbone,
    windows: &[Window],
    f: usize,
    fold: &crate::signal_io::Fold,
    kind: &TaskKind,
    config: &FinetuneConfig,
    progress: &mut impl FnMut(&HistoryRecord),
) -> Result<FoldResult> {
    let task = config.task.as_str();
    let seed = derive_seed(config.seed, &[f as u64]);
    let full_train = split(windows, &fold.train, task, kind)?;
    let val = split(windows, &fold.validation, task, kind)?;
    let test = split(windows, &fold.test, task, kind)?;
    if full_train.windows.is_empty() || val.windows.is_empty() || test.windows.is_empty() {
        return Err(Error::InsufficientData(format!("fold {f}: empty train, validation or test split")));
    }
    let classes: Vec<Option<usize>> = full_train
        .targets
        .iter()
        .map(|t| match kind {
            TaskKind::Classification { .. } => Some(t[0] as usize),
            _ => None,
        })
        .collect();
    let (keep, subsample) = subsample_training(&classes, config.fraction, derive_seed(seed, &[7]))?;
    if let TaskKind::Classification { classes: k } = kind {
        for c in 0..*k {
            if !keep.iter().any(|&i| classes[i] == Some(c)) {
                return Err(Error::InsufficientData(format!("fold {f}: class {c} has no training windows")));
            }
        }
    }
    let train = Split {
        windows: keep.iter().map(|&i| full_train.windows[i]).collect(),
        targets: keep.iter().map(|&i| full_train.targets[i].clone()).collect(),
    };
    let batch_size = config.batch_size.unwrap_or(if train.windows.len() >= SMALL_DATASET_WINDOWS {
        DEFAULT_BATCH_SIZE
    } else {
        SMALL_BATCH_SIZE
    });

    let mut model = Model {
        backbone: init.clone(),
        head: Head::new(
            HeadSpec::Mlp {
                hidden: config.head_hidden_dim,
                outputs: kind.output_dim(),
            },
            init.config.embedding_dim,
            derive_seed(seed, &[0]),
        ),
    };
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut history = Vec::new();
    let better = |a: f64, b: f64| match config.selection {
        Selection::ValidationLoss => a < b,
        Selection::Metric => a > b || (b.is_nan() && !a.is_nan()),
    };

    // Projector mode runs the frozen backbone once, in eval mode.
    let features = match config.mode {
        FinetuneMode::Projector => {
            let cache = model.backbone.kernels()?;
            let pooled = |s: &Split<'_>| -> Result<Vec<Vec<f64>>> {
                s.windows.par_iter().map(|w| model.backbone.pooled(&cache, &w.values)).collect()
            };
            Some((pooled(&train)?, pooled(&val)?, pooled(&test)?))
        }
        FinetuneMode::FullModel => None,
    };
    let mut projector = Projector {
        decoder: model.backbone.decoder.clone(),
        head: model.head.clone(),
    };
    let outputs = |model: &Model, projector: &Projector, s: &Split<'_>, which: usize| -> Result<Vec<Vec<f64>>> {
        match &features {
            Some(feats) => {
                let set = [&feats.0, &feats.1, &feats.2][which];
                Ok(set.iter().map(|p| projector.output(p)).collect())
            }
            None => {
                let inputs: Vec<&[f64]> = s.windows.iter().map(|w| w.values.as_slice()).collect();
                model.outputs(&inputs)
            }
        }
    };

    let mut best: Option<(f64, usize, Model, Projector, AdamW)> = None;
    let mut step = 0u64;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.windows.len()).collect();
        order.shuffle(&mut rng_from(seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(batch_size).enumerate() {
            let loss = match &features {
                Some((feats, _, _)) => {
                    let batch: Vec<(&[f64], &[f64])> = idx
                        .iter()
                        .map(|&i| (feats[i].as_slice(), train.targets[i].as_slice()))
                        .collect();
                    let (loss, grads) = projector.batch_gradient(kind, &batch)?;
                    optimizer.step(&mut projector, &grads)?;
                    loss
                }
                None => {
                    let batch: Vec<Example<'_>> = idx
                        .iter()
                        .map(|&i| Example {
                            window: &train.windows[i].values,
                            target: &train.targets[i],
                            dropout_seed: derive_seed(seed, &[4, epoch as u64, b as u64, i as u64]),
                        })
                        .collect();
                    let (loss, grads) = model.batch_gradient(kind, &batch)?;
                    optimizer.step(&mut model, &grads)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at fold {f}, epoch {epoch}")));
            }
            step += 1;
            loss_sum += loss * idx.len() as f64;
        }
        let train_record = HistoryRecord {
            epoch,
            step,
            split: "train".into(),
            loss: loss_sum / train.windows.len() as f64,
            metric: None,
            metric_name: None,
            fold: Some(f),
        };
        let (val_loss, val_metric) = assess(f, task, kind, &val, &outputs(&model, &projector, &val, 1)?)?;
        let val_record = HistoryRecord {
            epoch,
            step,
            split: "validation".into(),
            loss: val_loss,
            metric: val_metric.is_finite().then_some(val_metric),
            metric_name: Some(primary_metric(kind).into()),
            fold: Some(f),
        };
        for r in [train_record, val_record] {
            progress(&r);
            history.push(r);
        }
        let criterion = match config.selection {
            Selection::ValidationLoss => val_loss,
            Selection::Metric => val_metric,
        };
        let improved = best.as_ref().is_none_or(|b| better(criterion, b.0));
        if improved {
            best = Some((criterion, epoch, model.clone(), projector.clone(), optimizer.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= config.patience {
            break;
        }
    }
    let (_, best_epoch, best_model, best_projector, best_optimizer) = best.expect("at least one epoch ran");
    model = best_model;
    if features.is_some() {
        model.backbone.decoder = best_projector.decoder.clone();
        model.head = best_projector.head.clone();
    }
    let test_outputs = outputs(&model, &best_projector, &test, 2)?;
    let predictions = predictions(f, task, kind, &test, &test_outputs);
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            stage: Stage::Finetune,
            epoch: best_epoch,
            seed: config.seed,
            network: model.backbone.config.clone(),
            head: model.head.spec(),
            optimizer: OptimizerMeta {
                lr: config.learning_rate,
                weight_decay: config.weight_decay,
                step: best_optimizer.steps(),
            },
            config: serde_json::json!({ "finetune": config, "fold": f, "subsample": subsample }),
            history,
        },
        model,
        optimizer: best_optimizer,
    };
    Ok(FoldResult {
        fold: f,
        checkpoint,
        predictions,
        best_epoch,
        epochs_run,
        subsample,
    })
}
