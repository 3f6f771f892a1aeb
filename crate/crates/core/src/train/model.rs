//! Backbone plus task head, and batched gradient evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task_loss;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::signal_io::TaskKind;
use crate::ssm::network::{Linear, Mode};
use crate::ssm::{gelu_grad_from_cdf, normal_cdf, Backbone, GradAccum, KernelCache, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Single affine map, used for the pretext task.
    Linear { outputs: usize },
    /// Affine, GELU, affine.
    Mlp { hidden: usize, outputs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(Linear),
    Mlp { hidden: Linear, out: Linear },
}

/// Values kept from a head forward pass.
pub struct HeadTape {
    hidden: Option<(Vec<f64>, Vec<f64>)>,
}

impl Head {
    pub fn new(spec: HeadSpec, d_in: usize, seed: u64) -> Self {
        match spec {
            HeadSpec::Linear { outputs } => Head::Linear(Linear::new(d_in, outputs, seed)),
            HeadSpec::Mlp { hidden, outputs } => Head::Mlp {
                hidden: Linear::new(d_in, hidden, derive_seed(seed, &[0])),
                out: Linear::new(hidden, outputs, derive_seed(seed, &[1])),
            },
        }
    }

    pub fn spec(&self) -> HeadSpec {
        match self {
            Head::Linear(l) => HeadSpec::Linear { outputs: l.d_out },
            Head::Mlp { hidden, out } => HeadSpec::Mlp {
                hidden: hidden.d_out,
                outputs: out.d_out,
            },
        }
    }

    pub fn forward(&self, e: &[f64]) -> (Vec<f64>, HeadTape) {
        match self {
            Head::Linear(l) => (l.apply(e), HeadTape { hidden: None }),
            Head::Mlp { hidden, out } => {
                let pre = hidden.apply(e);
                let cdf: Vec<f64> = pre.iter().map(|&v| normal_cdf(v)).collect();
                let act: Vec<f64> = pre.iter().zip(&cdf).map(|(v, c)| v * c).collect();
                (out.apply(&act), HeadTape { hidden: Some((pre, cdf)) })
            }
        }
    }

    /// Accumulates into `grad` and returns the gradient of the head input.
    pub fn backward(&self, e: &[f64], tape: &HeadTape, g_out: &[f64], grad: &mut Head) -> Vec<f64> {
        match (self, grad, &tape.hidden) {
            (Head::Linear(l), Head::Linear(gl), _) => l.backward_rows(e, g_out, 1, gl),
            (Head::Mlp { hidden, out }, Head::Mlp { hidden: gh, out: go }, Some((pre, cdf))) => {
                let act: Vec<f64> = pre.iter().zip(cdf).map(|(v, c)| v * c).collect();
                let mut g = out.backward_rows(&act, g_out, 1, go);
                for i in 0..g.len() {
                    g[i] *= gelu_grad_from_cdf(pre[i], cdf[i]);
                }
                hidden.backward_rows(e, &g, 1, gh)
            }
            _ => unreachable!("head, gradient and tape kinds always match"),
        }
    }

    pub fn zeros_like(&self) -> Head {
        let mut h = self.clone();
        h.fill_zero();
        h
    }
}

impl Params for Head {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        match self {
            Head::Linear(l) => l.collect(prefix, out),
            Head::Mlp { hidden, out: o } => {
                hidden.collect(&format!("{prefix}hidden."), out);
                o.collect(&format!("{prefix}out."), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            Head::Linear(l) => l.collect_mut(out),
            Head::Mlp { hidden, out: o } => {
                hidden.collect_mut(out);
                o.collect_mut(out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: Head,
}

impl Params for Model {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        self.backbone.collect(prefix, out);
        self.head.collect(&format!("{prefix}head."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.backbone.collect_mut(out);
        self.head.collect_mut(out);
    }
}

/// The trainable part in projector mode: decoder and head. Array names
/// match those of [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub decoder: Linear,
    pub head: Head,
}

impl Params for Projector {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        self.decoder.collect(&format!("{prefix}decoder."), out);
        self.head.collect(&format!("{prefix}head."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.decoder.collect_mut(out);
        self.head.collect_mut(out);
    }
}

impl Projector {
    pub fn output(&self, pooled: &[f64]) -> Vec<f64> {
        self.head.forward(&self.decoder.apply(pooled)).0
    }

    /// Mean loss and gradient over `(pooled features, target)` pairs.
    pub fn batch_gradient(&self, kind: &TaskKind, batch: &[(&[f64], &[f64])]) -> Result<(f64, Projector)> {
        let mut grad = Projector {
            decoder: Linear::zeros(self.decoder.d_in, self.decoder.d_out),
            head: self.head.zeros_like(),
        };
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (pooled, target) in batch {
            let e = self.decoder.apply(pooled);
            let (out, tape) = self.head.forward(&e);
            let (loss, g) = task_loss(kind, &out, target)?;
            total += loss;
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            let g_e = self.head.backward(&e, &tape, &g, &mut grad.head);
            self.decoder.backward_rows(pooled, &g_e, 1, &mut grad.decoder);
        }
        Ok((total * scale, grad))
    }
}

/// Samples per gradient chunk. Chunk sums are combined in chunk order, so
/// results do not depend on the number of threads.
pub const CHUNK: usize = 8;

/// One training example: window, numeric target and dropout seed.
pub struct Example<'a> {
    pub window: &'a [f64],
    pub target: &'a [f64],
    pub dropout_seed: u64,
}

impl Model {
    pub fn output(&self, cache: &KernelCache, window: &[f64]) -> Result<Vec<f64>> {
        let e = self.backbone.forward(cache, window, Mode::Eval)?;
        Ok(self.head.forward(&e).0)
    }

    /// Eval-mode raw outputs for a set of windows.
    pub fn outputs(&self, windows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let cache = self.backbone.kernels()?;
        windows.par_iter().map(|w| self.output(&cache, w)).collect()
    }

    /// Mean loss and full gradient over a batch, with dropout active.
    pub fn batch_gradient(&self, kind: &TaskKind, batch: &[Example<'_>]) -> Result<(f64, Model)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let cache = self.backbone.kernels()?;
        let scale = 1.0 / batch.len() as f64;
        let chunks: Vec<&[Example<'_>]> = batch.chunks(CHUNK).collect();
        let group = rayon::current_num_threads().max(1);
        let mut total: Option<(f64, GradAccum, Head)> = None;
        for wave in chunks.chunks(group) {
            let parts = wave
                .par_iter()
                .map(|chunk| {
                    let mut acc = GradAccum::new(&self.backbone, &cache);
                    let mut head = self.head.zeros_like();
                    let mut loss = 0.0;
                    for ex in chunk.iter() {
                        let mode = Mode::Train { seed: ex.dropout_seed };
                        let (e, tape) = self.backbone.forward_recorded(&cache, ex.window, mode)?;
                        let (out, htape) = self.head.forward(&e);
                        let (l, g) = task_loss(kind, &out, ex.target)?;
                        loss += l;
                        let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                        let g_e = self.head.backward(&e, &htape, &g, &mut head);
                        self.backbone.backward(&cache, &tape, &g_e, &mut acc);
                    }
                    Ok((loss, acc, head))
                })
                .collect::<Result<Vec<_>>>()?;
            for (loss, acc, head) in parts {
                match &mut total {
                    None => total = Some((loss, acc, head)),
                    Some((tl, ta, th)) => {
                        *tl += loss;
                        ta.merge(&acc);
                        th.add_assign(&head);
                    }
                }
            }
        }
        let (loss, acc, head) = total.expect("batch is not empty");
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((
            loss,
            Model {
                backbone: acc.finish(&cache),
                head,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::NetworkConfig;

    fn model(head: HeadSpec) -> Model {
        let cfg = NetworkConfig {
            d_model: 3,
            d_state: 2,
            n_blocks: 1,
            dropout: 0.0,
            embedding_dim: 4,
            window_len: 16,
        };
        let backbone = Backbone::new(cfg, 1).unwrap();
        Model {
            head: Head::new(head, 4, 2),
            backbone,
        }
    }

    #[test]
    fn head_and_batch_gradients_match_finite_differences() {
        for (spec, kind, targets) in [
            (
                HeadSpec::Mlp { hidden: 5, outputs: 2 },
                TaskKind::Classification { classes: 2 },
                vec![vec![1.0], vec![0.0]],
            ),
            (
                HeadSpec::Linear { outputs: 3 },
                TaskKind::Multilabel { classes: 3 },
                vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
            ),
        ] {
            let m = model(spec);
            let windows: Vec<Vec<f64>> = (0..2)
                .map(|s| (0..16).map(|i| ((i * (s + 3)) % 7) as f64 / 3.0 - 1.0).collect())
                .collect();
            let batch: Vec<Example<'_>> = windows
                .iter()
                .zip(&targets)
                .map(|(w, t)| Example { window: w, target: t, dropout_seed: 0 })
                .collect();
            let (_, g) = m.batch_gradient(&kind, &batch).unwrap();
            let loss = |m: &Model| m.batch_gradient(&kind, &batch).unwrap().0;
            let grads: Vec<Vec<f64>> = g.tensors().into_iter().map(|t| t.2.to_vec()).collect();
            let h = 1e-5;
            for (t, gt) in grads.iter().enumerate() {
                for i in 0..gt.len() {
                    let mut p = m.clone();
                    p.tensors_mut()[t][i] += h;
                    let up = loss(&p);
                    p.tensors_mut()[t][i] -= 2.0 * h;
                    let fd = (up - loss(&p)) / (2.0 * h);
                    let tol = (1e-3 * fd.abs().max(gt[i].abs())).max(1e-6);
                    assert!((fd - gt[i]).abs() <= tol, "tensor {t}[{i}]: {} vs {fd}", gt[i]);
                }
            }
        }
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let m = model(HeadSpec::Mlp { hidden: 3, outputs: 1 });
        let p = Projector {
            decoder: Linear::new(3, 4, 9),
            head: m.head.clone(),
        };
        let kind = TaskKind::Regression { min: 0.0, max: 1.0 };
        let feats = [vec![0.2, -0.4, 1.0], vec![1.5, 0.3, -0.7]];
        let targets = [vec![0.3], vec![0.9]];
        let batch: Vec<(&[f64], &[f64])> = feats
            .iter()
            .zip(&targets)
            .map(|(f, t)| (f.as_slice(), t.as_slice()))
            .collect();
        let (_, g) = p.batch_gradient(&kind, &batch).unwrap();
        let h = 1e-6;
        for (t, (_, _, gt)) in g.tensors().into_iter().enumerate() {
            for i in 0..gt.len() {
                let mut q = p.clone();
                q.tensors_mut()[t][i] += h;
                let up = q.batch_gradient(&kind, &batch).unwrap().0;
                q.tensors_mut()[t][i] -= 2.0 * h;
                let fd = (up - q.batch_gradient(&kind, &batch).unwrap().0) / (2.0 * h);
                assert!((fd - gt[i]).abs() < 1e-7);
            }
        }
    }
}
