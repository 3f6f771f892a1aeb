use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::distance::MeanStd;
use super::metrics::{accuracy, auroc_macro, ccc, f1_macro, f1_macro_multilabel};
use crate::error::{Error, Result};
use crate::signal_io::{LabelValue, SplitMode, TaskKind};

/// Threshold turning multilabel probabilities into hard predictions.
pub const MULTILABEL_THRESHOLD: f64 = 0.5;

/// One test-set prediction. `output` holds class probabilities
/// (classification), per-label probabilities (multilabel) or the single
/// regressed value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fold: usize,
    pub record_id: String,
    pub subject_id: String,
    pub target: LabelValue,
    pub output: Vec<f64>,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            index,
            message: format!("prediction: {e}"),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub kind: TaskKind,
    pub split_mode: Option<SplitMode>,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, MeanStd>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

/// Metrics of one set of predictions for the given task kind.
pub fn score(kind: &TaskKind, preds: &[&Prediction]) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match kind {
        TaskKind::Classification { classes } => {
            let truth = preds
                .iter()
                .map(|p| {
                    p.target
                        .as_class()
                        .ok_or_else(|| Error::Task(format!("{}: target is not a class", p.record_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<usize> = preds.iter().map(|p| argmax(&p.output)).collect();
            m.insert("accuracy".into(), accuracy(&truth, &pred, *classes)?);
            m.insert("f1_macro".into(), f1_macro(&truth, &pred, *classes)?);
        }
        TaskKind::Multilabel { .. } => {
            let truth = preds
                .iter()
                .map(|p| match &p.target {
                    LabelValue::Vector(v) => Ok(v.iter().map(|&x| x > 0.5).collect::<Vec<bool>>()),
                    _ => Err(Error::Task(format!("{}: target is not multi-hot", p.record_id))),
                })
                .collect::<Result<Vec<_>>>()?;
            let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.output.clone()).collect();
            let hard: Vec<Vec<bool>> = scores
                .iter()
                .map(|s| s.iter().map(|&x| x > MULTILABEL_THRESHOLD).collect())
                .collect();
            m.insert("auroc_macro".into(), auroc_macro(&truth, &scores)?.value);
            m.insert("f1_macro".into(), f1_macro_multilabel(&truth, &hard)?);
        }
        TaskKind::Regression { .. } => {
            let truth: Vec<f64> = preds
                .iter()
                .map(|p| {
                    p.target
                        .as_f64()
                        .ok_or_else(|| Error::Task(format!("{}: target is not real", p.record_id)))
                })
                .collect::<Result<_>>()?;
            let out: Vec<f64> = preds.iter().map(|p| p.output[0]).collect();
            m.insert("ccc".into(), ccc(&truth, &out)?);
            let mse = truth.iter().zip(&out).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / truth.len() as f64;
            m.insert("rmse".into(), mse.sqrt());
        }
    }
    Ok(m)
}

/// Per-fold metrics and their mean and standard deviation across folds.
pub fn evaluate(
    task: &str,
    kind: &TaskKind,
    split_mode: Option<SplitMode>,
    predictions: &[Prediction],
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut by_fold: BTreeMap<usize, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_fold.entry(p.fold).or_default().push(p);
    }
    if by_fold.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    let folds = by_fold
        .into_iter()
        .map(|(fold, preds)| {
            Ok(FoldMetrics {
                fold,
                n: preds.len(),
                metrics: score(kind, &preds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate_folds(&folds);
    Ok(EvalReport {
        task: task.into(),
        kind: kind.clone(),
        split_mode,
        folds,
        aggregate,
        config,
    })
}

pub fn aggregate_folds(folds: &[FoldMetrics]) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for f in folds {
        for (k, v) in &f.metrics {
            values.entry(k).or_default().push(*v);
        }
    }
    values
        .into_iter()
        .map(|(k, v)| (k.to_string(), MeanStd::of(&v)))
        .collect()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
