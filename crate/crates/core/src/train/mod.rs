//! Losses, the optimizer, checkpoints, self-supervised pretraining and
//! downstream fine-tuning.

pub mod checkpoint;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{LabelValue, TaskKind};

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use finetune::{finetune, subsample_training, FinetuneConfig, FinetuneMode, FoldResult, Selection};
pub use model::{Head, HeadSpec, Model};
pub use optim::{adamw_step, AdamW, Moments};
pub use pretrain::{pretext_f1, pretrain, PretrainConfig};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with logits averaged over classes, and its gradient.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_finite(logits, "logits")?;
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} logits for {} targets", logits.len(), targets.len())));
    }
    let c = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - t) / c
        })
        .collect();
    Ok((loss / c, grad))
}

/// Mean over samples and classes of binary cross-entropy with logits.
pub fn bce_multilabel_loss(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape("logit and target batches differ".into()));
    }
    let mut total = 0.0;
    for (l, t) in logits.iter().zip(targets) {
        total += bce_with_logits(l, t)?.0;
    }
    Ok(total / logits.len() as f64)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    check_finite(logits, "logits")?;
    if class >= logits.len() {
        return Err(Error::Shape(format!("class {class} for {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[class] -= 1.0;
    Ok((lse - logits[class], grad))
}

pub fn mse(output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_finite(output, "regression output")?;
    if output.len() != target.len() || output.is_empty() {
        return Err(Error::Shape("output and target widths differ".into()));
    }
    let n = output.len() as f64;
    let loss = output.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n;
    let grad = output.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect();
    Ok((loss, grad))
}

/// Numeric target for a label under a task.
pub fn target_vector(kind: &TaskKind, label: &LabelValue) -> Result<Vec<f64>> {
    let bad = || Error::Task(format!("label {label:?} does not fit task {kind:?}"));
    match kind {
        TaskKind::Classification { classes } => {
            let c = label.as_class().filter(|c| c < classes).ok_or_else(bad)?;
            Ok(vec![c as f64])
        }
        TaskKind::Multilabel { classes } => match label {
            LabelValue::Vector(v) if v.len() == *classes => Ok(v.clone()),
            _ => Err(bad()),
        },
        TaskKind::Regression { .. } => label.as_f64().map(|v| vec![v]).ok_or_else(bad),
    }
}

/// Loss and output gradient for one sample.
pub fn task_loss(kind: &TaskKind, output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    match kind {
        TaskKind::Classification { .. } => softmax_cross_entropy(output, target[0] as usize),
        TaskKind::Multilabel { .. } => bce_with_logits(output, target),
        TaskKind::Regression { .. } => mse(output, target),
    }
}

/// Raw network output to reported prediction: probabilities or the value.
pub fn output_transform(kind: &TaskKind, output: &[f64]) -> Vec<f64> {
    match kind {
        TaskKind::Classification { .. } => softmax(output),
        TaskKind::Multilabel { .. } => output.iter().map(|&v| sigmoid(v)).collect(),
        TaskKind::Regression { .. } => output.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_spot_values() {
        let (l, _) = bce_with_logits(&[0.0; 9], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = bce_with_logits(&[40.0, -40.0, 40.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(l < 1e-12);
        let (l, _) = bce_with_logits(&[1.0, -1.0], &[1.0, 0.0]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(bce_with_logits(&[f64::NAN], &[1.0]).is_err());
        let batch = bce_multilabel_loss(&[vec![1.0, -1.0], vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((batch - (0.313_261_687_518_222_8 + std::f64::consts::LN_2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = [0.3, -1.2, 2.0];
        let h = 1e-6;
        for (f, target) in [
            (0usize, vec![1.0, 0.0, 1.0]),
            (1, vec![2.0]),
            (2, vec![0.5, -0.5, 1.5]),
        ] {
            let eval = |x: &[f64]| match f {
                0 => bce_with_logits(x, &target).unwrap(),
                1 => softmax_cross_entropy(x, 2).unwrap(),
                _ => mse(x, &target).unwrap(),
            };
            let (_, g) = eval(&x);
            for i in 0..3 {
                let mut up = x;
                up[i] += h;
                let mut down = x;
                down[i] -= h;
                let fd = (eval(&up).0 - eval(&down).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let (l, _) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-12);
    }
}
