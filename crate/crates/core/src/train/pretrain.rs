//! Self-supervised pretraining: predict which transforms were applied.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, OptimizerMeta, Stage};
use super::model::{Example, Head, HeadSpec, Model};
use super::optim::AdamW;
use super::HistoryRecord;
use crate::augment::{compose, AugmentConfig, N_PRETEXT_CLASSES};
use crate::error::{Error, Result};
use crate::eval::metrics::f1_macro_multilabel;
use crate::rng::{derive_seed, rng_from};
use crate::signal_io::TaskKind;
use crate::ssm::{Backbone, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    /// Negative control: shuffle pretext targets across the samples of
    /// each epoch so they no longer describe the inputs.
    pub shuffle_targets: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            network: NetworkConfig::default(),
            augment: AugmentConfig::default(),
            shuffle_targets: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        self.network.validate()?;
        self.augment.validate()
    }
}

pub const PRETEXT_TASK: TaskKind = TaskKind::Multilabel {
    classes: N_PRETEXT_CLASSES,
};

/// Pretext input and target for source `index` in `epoch`: a random window
/// of the source, then a random transform subset.
fn pretext_example(source: &[f64], window_len: usize, augment: &AugmentConfig, seed: u64, epoch: u64, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let offset = rng_from(seed, &[2, epoch, index]).random_range(0..=source.len() - window_len);
    let window = &source[offset..offset + window_len];
    let out = compose(window, augment, derive_seed(seed, &[3, epoch, index]))?;
    Ok((out.values, out.target.to_vec()))
}

/// Trains backbone and linear pretext head on `sources`, each at least one
/// window long. `progress` sees one record per epoch.
pub fn pretrain(sources: &[Vec<f64>], config: &PretrainConfig, mut progress: impl FnMut(&HistoryRecord)) -> Result<Checkpoint> {
    config.validate()?;
    let window_len = config.network.window_len;
    if sources.is_empty() {
        return Err(Error::InsufficientData("no pretraining sources".into()));
    }
    if let Some(i) = sources.iter().position(|s| s.len() < window_len) {
        return Err(Error::SignalTooShort {
            needed: window_len,
            actual: sources[i].len(),
        });
    }
    let seed = config.seed;
    let mut model = Model {
        backbone: Backbone::new(config.network.clone(), derive_seed(seed, &[0]))?,
        head: Head::new(
            HeadSpec::Linear {
                outputs: N_PRETEXT_CLASSES,
            },
            config.network.embedding_dim,
            derive_seed(seed, &[6]),
        ),
    };
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 1..=config.epochs as u64 {
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut rng_from(seed, &[1, epoch]));
        let samples = order
            .par_iter()
            .map(|&i| pretext_example(&sources[i], window_len, &config.augment, seed, epoch, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let mut targets: Vec<Vec<f64>> = samples.iter().map(|s| s.1.clone()).collect();
        if config.shuffle_targets {
            targets.shuffle(&mut rng_from(seed, &[5, epoch]));
        }
        let mut loss_sum = 0.0;
        for (b, start) in (0..samples.len()).step_by(config.batch_size).enumerate() {
            let end = (start + config.batch_size).min(samples.len());
            let batch: Vec<Example<'_>> = (start..end)
                .map(|k| Example {
                    window: &samples[k].0,
                    target: &targets[k],
                    dropout_seed: derive_seed(seed, &[4, epoch, b as u64, k as u64]),
                })
                .collect();
            let (loss, grads) = model.batch_gradient(&PRETEXT_TASK, &batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, step {}", step + 1)),
                other => other,
            })?;
            optimizer.step(&mut model, &grads)?;
            step += 1;
            loss_sum += loss * batch.len() as f64;
        }
        let record = HistoryRecord {
            epoch: epoch as usize,
            step,
            split: "train".into(),
            loss: loss_sum / samples.len() as f64,
            metric: None,
            metric_name: None,
            fold: None,
        };
        progress(&record);
        history.push(record);
    }

    Ok(Checkpoint {
        meta: CheckpointMeta {
            stage: Stage::Pretrain,
            epoch: config.epochs,
            seed,
            network: config.network.clone(),
            head: model.head.spec(),
            optimizer: OptimizerMeta {
                lr: config.learning_rate,
                weight_decay: config.weight_decay,
                step,
            },
            config: serde_json::to_value(config)?,
            history,
        },
        model,
        optimizer,
    })
}

/// Macro-F1 of transform prediction (probability threshold 0.5) on freshly
/// augmented copies of `windows`.
pub fn pretext_f1(model: &Model, windows: &[Vec<f64>], augment: &AugmentConfig, seed: u64) -> Result<f64> {
    let samples = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| compose(w, augment, derive_seed(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
    let outputs = model.outputs(&inputs)?;
    let truth: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| s.target.iter().map(|&t| t > 0.5).collect())
        .collect();
    let pred: Vec<Vec<bool>> = outputs
        .iter()
        .map(|o| o.iter().map(|&v| v > 0.0).collect())
        .collect();
    f1_macro_multilabel(&truth, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::Params;

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 7,
            network: NetworkConfig {
                d_model: 4,
                d_state: 3,
                n_blocks: 1,
                dropout: 0.1,
                embedding_dim: 6,
                window_len: 200,
            },
            ..PretrainConfig::default()
        }
    }

    fn sources(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|s| (0..300).map(|i| ((i as f64) * 0.05 * (s + 1) as f64).sin()).collect())
            .collect()
    }

    #[test]
    fn smoke_and_determinism() {
        let cfg = tiny_config();
        let mut seen = Vec::new();
        let a = pretrain(&sources(10), &cfg, |r| seen.push(r.clone())).unwrap();
        assert_eq!(a.meta.epoch, 1);
        assert_eq!(a.meta.history.len(), 1);
        assert_eq!(seen, a.meta.history);
        assert!(a.meta.history[0].loss.is_finite() && a.meta.history[0].loss > 0.0);
        assert_eq!(a.meta.optimizer.step, 3);
        let b = pretrain(&sources(10), &cfg, |_| {}).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let mut other = cfg.clone();
        other.seed = 8;
        let c = pretrain(&sources(10), &other, |_| {}).unwrap();
        assert_ne!(c.model.tensors()[0].2, a.model.tensors()[0].2);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny_config();
        assert!(matches!(pretrain(&[], &cfg, |_| {}), Err(Error::InsufficientData(_))));
        assert!(matches!(
            pretrain(&[vec![0.0; 100]], &cfg, |_| {}),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn pretext_f1_is_a_probability() {
        let cfg = tiny_config();
        let ck = pretrain(&sources(4), &cfg, |_| {}).unwrap();
        let windows: Vec<Vec<f64>> = sources(6).into_iter().map(|s| s[..200].to_vec()).collect();
        let f = pretext_f1(&ck.model, &windows, &cfg.augment, 1).unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
}
