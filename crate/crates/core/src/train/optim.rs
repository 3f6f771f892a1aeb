//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ssm::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected update. Decay scales the parameters directly and
/// never enters the moment estimates.
pub fn adamw_step(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::Shape("parameter, gradient and moment lengths differ".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        let m = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] = params[i] * decay - lr * (m / c1) / ((v / c2).sqrt() + EPS);
    }
    Ok(())
}

/// Whether weight decay applies to a named array. State matrices, input
/// maps, step sizes, normalization parameters and biases are not decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with("ssm.c")
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every array of `params` from the matching array of `grads`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|t| t.0).collect();
        let grads = grads.tensors();
        for ((name, p), (gname, _, g)) in names.into_iter().zip(params.tensors_mut()).zip(grads) {
            debug_assert_eq!(name, gname);
            let wd = if decays(&name) { self.weight_decay } else { 0.0 };
            let m = self
                .state
                .entry(name)
                .or_insert_with(|| Moments::zeros(p.len()));
            adamw_step(p, g, m, self.lr, wd)?;
        }
        Ok(())
    }

    /// Number of updates taken so far.
    pub fn steps(&self) -> u64 {
        self.state.values().map(|m| m.step).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![1.5, -2.0];
        let mut m = Moments::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, 0.001, 0.0).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_parameters() {
        let mut p = vec![1.0, -3.0];
        let mut m = Moments::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, 0.001, 0.01).unwrap();
        assert_eq!(p, vec![1.0 * (1.0 - 1e-5), -3.0 * (1.0 - 1e-5)]);
    }

    #[test]
    fn two_hand_computed_steps() {
        // lr 0.1, decay 0.01, gradients 0.5 then -0.25 from p = 1.
        let mut p = vec![1.0];
        let mut m = Moments::zeros(1);
        adamw_step(&mut p, &[0.5], &mut m, 0.1, 0.01).unwrap();
        assert!((p[0] - 0.899_000_002).abs() < 1e-12);
        assert!((m.m[0] - 0.05).abs() < 1e-15);
        assert!((m.v[0] - 0.00025).abs() < 1e-15);
        adamw_step(&mut p, &[-0.25], &mut m, 0.1, 0.01).unwrap();
        assert!((p[0] - 0.871_467_298_705_846_2).abs() < 1e-12);
        assert!((m.m[0] - 0.02).abs() < 1e-15);
        assert!((m.v[0] - 0.000_312_25).abs() < 1e-15);
        assert_eq!(m.step, 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![1.0];
        let mut m = Moments::zeros(1);
        assert!(adamw_step(&mut p, &[f64::INFINITY], &mut m, 0.1, 0.0).is_err());
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn decay_selection() {
        assert!(decays("blocks.0.mix.weight"));
        assert!(decays("blocks.3.ssm.c"));
        assert!(!decays("blocks.3.ssm.a"));
        assert!(!decays("blocks.3.ssm.log_dt"));
        assert!(!decays("decoder.bias"));
        assert!(!decays("blocks.0.norm.gamma"));
    }
}
