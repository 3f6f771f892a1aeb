//! Subcommand implementations. Each reads its inputs, writes only under
//! `--out`, and logs one record per notable step.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use ssmecg::augment::compose;
use ssmecg::eval::distance::{embedding_distance_report, EmbeddingRow, EmbeddingSet};
use ssmecg::eval::report::{evaluate, read_predictions, write_predictions};
use ssmecg::eval::synth::synth_corpus;
use ssmecg::preprocess::{
    detect_r_peaks, fixed_windows, heart_rate_bpm, preprocess_records, read_windows, segment, write_windows,
    PreprocessConfig, SegmentMode, Window,
};
use ssmecg::rng::derive_seed;
use ssmecg::signal_io::{
    dataset_dir, import_csv, load_manifest, make_splits, quality_gate, save_manifest, DatasetManifest, EcgRecord,
    SplitMode, TaskKind,
};
use ssmecg::ssm::{Backbone, Mode, NetworkConfig};
use ssmecg::train::{finetune, pretrain, Checkpoint, FinetuneMode, PretrainConfig};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::{write, RunDir};
use crate::{Cli, Command};

/// Schema and preprocessing settings stored next to preprocessed windows.
pub const DATA_INFO_FILE: &str = "preprocess.json";
pub const SOURCES_DIR: &str = "sources";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const FINETUNE_INFO_FILE: &str = "finetune.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const DISTANCE_REPORT_FILE: &str = "distance_report.json";
pub const AUGMENT_FILE: &str = "augmented.jsonl";
/// Unmodified inputs of an augmentation preview, row-aligned with the output.
pub const ORIGINAL_DIR: &str = "original";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub dataset_name: String,
    pub task_schema: BTreeMap<String, TaskKind>,
    pub preprocess: PreprocessConfig,
    pub window_len: usize,
    pub source_len: usize,
    pub kept_records: Vec<String>,
    pub dropped_records: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_total: usize,
    pub train_kept: usize,
}

/// What `evaluate` needs from a fine-tuning run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneInfo {
    pub task: String,
    pub kind: TaskKind,
    pub split_mode: SplitMode,
    pub pretrained: bool,
    pub folds: Vec<FoldSummary>,
    pub config: serde_json::Value,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let seed = config.resolve_seed(cli.seed)?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.subjects {
                config.synth.subjects = n;
            }
            if let Some(n) = a.windows_per_subject {
                config.synth.windows_per_subject = n;
            }
            config.validate()?;
            let run = RunDir::create(&a.out, "synth", &config, &[], quiet)?;
            let s = &config.synth;
            let manifest = synth_corpus(s.subjects, s.windows_per_subject, seed, &s.generator);
            save_manifest(&manifest, &a.out)?;
            run.event("done", json!({"records": manifest.records.len(), "subjects": s.subjects}));
            Ok(())
        }
        Command::Import(a) => {
            config.validate()?;
            let inputs: Vec<(&str, &Path)> = a.from_csv.iter().map(|p| ("csv", p.as_path())).collect();
            let run = RunDir::create(&a.out, "import", &config, &inputs, quiet)?;
            let mut manifest = DatasetManifest::new(a.dataset_name.clone());
            for p in &a.from_csv {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| CliError::Usage(format!("{} has no file name", p.display())))?;
                let mut r: EcgRecord = import_csv(p, &stem, &a.subject, a.rate)?;
                r.session_tag = a.session.clone();
                manifest.records.push(r);
            }
            save_manifest(&manifest, &a.out)?;
            run.event("done", json!({"records": manifest.records.len()}));
            Ok(())
        }
        Command::Preprocess(a) => {
            config.validate()?;
            let dir = dataset_dir(&a.manifest);
            let run = RunDir::create(&a.out, "preprocess", &config, &[("dataset", &dir)], quiet)?;
            preprocess_cmd(&run, &dir, &config)
        }
        Command::AugmentPreview(a) => {
            config.validate()?;
            let run = RunDir::create(&a.out, "augment-preview", &config, &[("data", &a.windows)], quiet)?;
            let windows = read_windows(&a.windows)?;
            let n = a.count.min(windows.len());
            let mut index = Vec::new();
            let mut out = Vec::with_capacity(n);
            for (i, w) in windows.iter().take(n).enumerate() {
                let o = compose(&w.values, &config.augment, derive_seed(seed, &[i as u64]))?;
                serde_json::to_writer(&mut index, &json!({
                    "row": i,
                    "record_id": w.record_id,
                    "target": o.target,
                    "applied": o.applied,
                }))?;
                index.push(b'\n');
                out.push(Window { values: o.values, ..w.clone() });
            }
            write_windows(&a.out, &out)?;
            write_windows(&run.path(ORIGINAL_DIR), &windows[..n])?;
            write(&run.path(AUGMENT_FILE), &index)?;
            run.event("done", json!({"windows": n}));
            Ok(())
        }
        Command::Pretrain(a) => {
            if let Some(e) = a.epochs {
                config.pretrain.epochs = e;
            }
            if let Some(b) = a.batch_size {
                config.pretrain.batch_size = b;
            }
            let info = read_info(&a.data)?;
            config.model.window_len = info.window_len;
            config.validate()?;
            let run = RunDir::create(&a.out, "pretrain", &config, &[("data", &a.data)], quiet)?;
            pretrain_cmd(&run, &a.data, &config, seed)
        }
        Command::Finetune(a) => {
            let f = &mut config.finetune;
            if let Some(t) = a.task {
                f.task = t;
            }
            if let Some(m) = &a.mode {
                f.mode = m.parse::<FinetuneMode>()?;
            }
            if let Some(x) = a.fraction {
                f.fraction = x;
            }
            if let Some(x) = a.learning_rate {
                f.learning_rate = x;
            }
            if let Some(x) = a.max_epochs {
                f.max_epochs = x;
            }
            if let Some(s) = &a.split {
                config.split.mode = s.parse::<SplitMode>()?;
            }
            if let Some(k) = a.folds {
                config.split.folds = k;
            }
            let info = read_info(&a.data)?;
            config.model.window_len = info.window_len;
            config.validate()?;
            config.finetune.validate().map_err(|e| CliError::Config {
                key: "finetune".into(),
                message: e.to_string(),
            })?;
            let mut inputs: Vec<(&str, &Path)> = vec![("data", &a.data)];
            if let Some(c) = &a.checkpoint {
                inputs.push(("checkpoint", c));
            }
            let run = RunDir::create(&a.out, "finetune", &config, &inputs, quiet)?;
            finetune_cmd(&run, &a.data, a.checkpoint.as_deref(), &info, &config, seed)
        }
        Command::Evaluate(a) => {
            config.validate()?;
            let run = RunDir::create(&a.out, "evaluate", &config, &[("predictions", &a.predictions)], quiet)?;
            let info: FinetuneInfo = read_json(&a.predictions.join(FINETUNE_INFO_FILE))?;
            if let Some(t) = a.task.as_ref().filter(|t| **t != info.task) {
                return Err(ssmecg::Error::Task(format!("predictions are for task {:?}, not {t:?}", info.task)).into());
            }
            let preds = read_predictions(&a.predictions.join(PREDICTIONS_FILE))?;
            let report = evaluate(&info.task, &info.kind, Some(info.split_mode), &preds, info.config)?;
            write(&run.path(EVAL_REPORT_FILE), report.to_json()?.as_bytes())?;
            run.event("done", json!({"task": info.task, "aggregate": report.aggregate}));
            Ok(())
        }
        Command::Embed(a) => {
            config.validate()?;
            let run = RunDir::create(&a.out, "embed", &config, &[("checkpoint", &a.checkpoint), ("data", &a.data)], quiet)?;
            embed_cmd(&run, &a.checkpoint, &a.data)
        }
        Command::Distances(a) => {
            config.validate()?;
            let run = RunDir::create(&a.out, "distances", &config, &[("embeddings", &a.embeddings)], quiet)?;
            let set = EmbeddingSet::read(&a.embeddings)?;
            let report = embedding_distance_report(&set)?;
            write(
                &run.path(DISTANCE_REPORT_FILE),
                (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
            )?;
            run.event("done", json!({"rows": set.rows.len()}));
            Ok(())
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_info(data: &Path) -> CliResult<DataInfo> {
    read_json(&data.join(DATA_INFO_FILE))
}

fn preprocess_cmd(run: &RunDir, dir: &Path, config: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(dir)?;
    let total = manifest.records.len();
    let (kept, dropped) = if config.gate.enabled {
        let g = quality_gate(manifest.records.clone(), config.gate.threshold)?;
        (g.kept, g.dropped)
    } else {
        (manifest.records.clone(), Vec::new())
    };
    run.event("quality-gate", json!({"records": total, "kept": kept.len(), "dropped": dropped.len()}));
    if kept.is_empty() {
        return Err(ssmecg::Error::InsufficientData("no record passed the quality gate".into()).into());
    }
    let gated = DatasetManifest {
        dataset_name: manifest.dataset_name.clone(),
        records: kept,
        task_schema: manifest.task_schema.clone(),
    };
    let pcfg = &config.preprocess;
    let processed = preprocess_records(&gated, pcfg)?;
    let windows = fixed_windows(&processed, pcfg.window_len());
    write_windows(&run.out, &windows)?;

    let source_len = pcfg.source_len();
    let mut sources = Vec::new();
    for r in processed.iter().filter(|r| r.samples.len() >= source_len) {
        for (start_offset, values) in segment(&r.samples, source_len, SegmentMode::Fixed)? {
            sources.push(Window {
                values,
                subject_id: r.subject_id.clone(),
                record_id: r.record_id.clone(),
                start_offset,
                labels: BTreeMap::new(),
            });
        }
    }
    write_windows(&run.path(SOURCES_DIR), &sources)?;

    let info = DataInfo {
        dataset_name: manifest.dataset_name.clone(),
        task_schema: manifest.task_schema.clone(),
        preprocess: pcfg.clone(),
        window_len: pcfg.window_len(),
        source_len,
        kept_records: gated.records.iter().map(|r| r.record_id.clone()).collect(),
        dropped_records: dropped.iter().map(|r| r.record_id.clone()).collect(),
    };
    write(&run.path(DATA_INFO_FILE), (serde_json::to_string_pretty(&info)? + "\n").as_bytes())?;
    run.event("done", json!({"windows": windows.len(), "sources": sources.len()}));
    Ok(())
}

fn pretrain_cmd(run: &RunDir, data: &Path, config: &RunConfig, seed: u64) -> CliResult<()> {
    let sources: Vec<Vec<f64>> = read_windows(&data.join(SOURCES_DIR))?
        .into_iter()
        .map(|w| w.values)
        .collect();
    let p = &config.pretrain;
    let pcfg = PretrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        weight_decay: p.weight_decay,
        seed,
        network: config.model.clone(),
        augment: config.augment.clone(),
        shuffle_targets: p.shuffle_targets,
    };
    run.event("start", json!({"sources": sources.len(), "epochs": p.epochs}));
    let ck = pretrain(&sources, &pcfg, |r| run.event("epoch", serde_json::to_value(r).unwrap_or_default()))?;
    ck.save(&run.path(PRETRAIN_CHECKPOINT))?;
    write_history(run, &ck)?;
    run.event("done", json!({"checkpoint": PRETRAIN_CHECKPOINT, "steps": ck.meta.optimizer.step}));
    Ok(())
}

fn write_history(run: &RunDir, ck: &Checkpoint) -> CliResult<()> {
    let mut out = Vec::new();
    for h in &ck.meta.history {
        serde_json::to_writer(&mut out, h)?;
        out.push(b'\n');
    }
    write(&run.path(HISTORY_FILE), &out)
}

/// Record list for the splitter, one entry per distinct window record.
fn split_manifest(windows: &[Window]) -> DatasetManifest {
    let mut m = DatasetManifest::new("windows");
    let mut seen = BTreeSet::new();
    for w in windows {
        if seen.insert(w.record_id.clone()) {
            m.records.push(EcgRecord::new(w.record_id.clone(), w.subject_id.clone(), 1.0, vec![0.0]));
        }
    }
    m
}

fn finetune_cmd(run: &RunDir, data: &Path, checkpoint: Option<&Path>, info: &DataInfo, config: &RunConfig, seed: u64) -> CliResult<()> {
    let task = config.finetune.task.clone();
    let kind = info
        .task_schema
        .get(&task)
        .cloned()
        .ok_or_else(|| ssmecg::Error::Task(format!("task {task:?} is not in the dataset schema")))?;
    let windows: Vec<Window> = read_windows(data)?
        .into_iter()
        .filter(|w| w.labels.contains_key(&task))
        .collect();
    if windows.is_empty() {
        return Err(ssmecg::Error::InsufficientData(format!("no window carries a {task:?} label")).into());
    }
    let init = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta.network.window_len != info.window_len {
                return Err(ssmecg::Error::Shape(format!(
                    "checkpoint expects {}-sample windows, data has {}",
                    ck.meta.network.window_len, info.window_len
                ))
                .into());
            }
            ck.model.backbone
        }
        // Same initialisation stream as pretraining, so the only difference
        // between the two starting points is training.
        None => Backbone::new(config.model.clone(), derive_seed(seed, &[0]))?,
    };
    let plan = make_splits(&split_manifest(&windows), config.split.mode, config.split.folds, seed)?;
    run.event("start", json!({"task": task, "windows": windows.len(), "folds": plan.folds.len(), "pretrained": checkpoint.is_some()}));
    let results = finetune(&init, &windows, &plan, &kind, &config.finetune, |r| {
        run.event("epoch", serde_json::to_value(r).unwrap_or_default())
    })?;
    let mut predictions = Vec::new();
    let mut folds = Vec::new();
    let mut history = Vec::new();
    for r in results {
        r.checkpoint.save(&run.path(&format!("fold{}.ckpt", r.fold)))?;
        for h in &r.checkpoint.meta.history {
            serde_json::to_writer(&mut history, h)?;
            history.push(b'\n');
        }
        folds.push(FoldSummary {
            fold: r.fold,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs_run,
            train_total: r.subsample.total,
            train_kept: r.subsample.kept,
        });
        predictions.extend(r.predictions);
    }
    write_predictions(&run.path(PREDICTIONS_FILE), &predictions)?;
    write(&run.path(HISTORY_FILE), &history)?;
    let finfo = FinetuneInfo {
        task,
        kind,
        split_mode: config.split.mode,
        pretrained: checkpoint.is_some(),
        folds,
        config: serde_json::to_value(&config.finetune)?,
    };
    write(&run.path(FINETUNE_INFO_FILE), (serde_json::to_string_pretty(&finfo)? + "\n").as_bytes())?;
    run.event("done", json!({"predictions": predictions.len()}));
    Ok(())
}

fn embed_cmd(run: &RunDir, checkpoint: &Path, data: &Path) -> CliResult<()> {
    let info = read_info(data)?;
    let ck = Checkpoint::load(checkpoint)?;
    let net: &NetworkConfig = &ck.meta.network;
    if net.window_len != info.window_len {
        return Err(ssmecg::Error::Shape(format!(
            "checkpoint expects {}-sample windows, data has {}",
            net.window_len, info.window_len
        ))
        .into());
    }
    let windows = read_windows(data)?;
    let values: Vec<Vec<f64>> = windows.iter().map(|w| w.values.clone()).collect();
    let embeddings = ck.model.backbone.forward_batch(&values, Mode::Eval)?;
    let rate = info.preprocess.target_rate_hz;
    let rows = windows
        .into_iter()
        .zip(embeddings)
        .map(|(w, embedding)| EmbeddingRow {
            hr_bpm: heart_rate_bpm(&detect_r_peaks(&w.values, rate), rate).ok(),
            record_id: format!("{}@{}", w.record_id, w.start_offset),
            subject_id: w.subject_id,
            labels: w.labels,
            embedding,
        })
        .collect();
    let set = EmbeddingSet { rows };
    set.write(&run.out)?;
    run.event("done", json!({"rows": set.rows.len(), "dim": set.dim()}));
    Ok(())
}
