//! Adam with bias correction and optional decoupled weight decay, plus the
//! constant-then-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::network::{Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightDecayMode {
    /// `p ← p − lr·wd·p` after the Adam step.
    #[default]
    Decoupled,
    /// `g ← g + wd·p` before the moment updates.
    L2,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    step: u64,
    m1: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64, decay_mode: WeightDecayMode) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_mode,
            step: 0,
            m1: Vec::new(),
            m2: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m1, &self.m2)
    }

    /// One update over matching lists of parameter and gradient tensors.
    /// `names` label tensors in diagnostics.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::dim("parameter and gradient tensors disagree in shape"));
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NanGradient {
                layer: names.get(i).cloned().unwrap_or_else(|| format!("tensor{i}")),
                step: self.step + 1,
            });
        }
        if self.m1.is_empty() {
            self.m1 = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.m2 = self.m1.clone();
        } else if self.m1.len() != grads.len() || self.m1.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::dim("gradient shapes changed between steps"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m1 = &mut self.m1[t];
            let m2 = &mut self.m2[t];
            for i in 0..p.len() {
                let mut gi = g[i];
                if self.decay_mode == WeightDecayMode::L2 {
                    gi += self.weight_decay * p[i];
                }
                m1[i] = self.beta1 * m1[i] + (1.0 - self.beta1) * gi;
                m2[i] = self.beta2 * m2[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                if self.decay_mode == WeightDecayMode::Decoupled {
                    p[i] -= lr * self.weight_decay * p[i];
                }
            }
        }
        Ok(())
    }

    /// Updates every trainable tensor of the model.
    pub fn step(&mut self, model: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        {
            let mut tensors = model.tensors_mut();
            self.update(&mut tensors, &grads.values, &grads.names, lr)?;
        }
        model.bump_version();
        Ok(())
    }
}

/// Constant `lr0` during warm-up, then cosine annealing to zero over the
/// fine-tuning iterations. `t` is the 0-based global iteration.
pub fn lr_schedule(t: usize, warmup_epochs: usize, finetune_epochs: usize, iters_per_epoch: usize, lr0: f64) -> f64 {
    let warm = warmup_epochs * iters_per_epoch;
    if t < warm {
        return lr0;
    }
    let total = finetune_epochs * iters_per_epoch;
    if total == 0 {
        return lr0;
    }
    let p = ((t - warm) as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn zero_grads_only_decay() {
        let mut adam = Adam::new(0.1, WeightDecayMode::Decoupled);
        let mut p = vec![2.0, -1.0];
        adam.update(&mut [&mut p], &[vec![0.0, 0.0]], &names(1), 0.5).unwrap();
        assert_eq!(p, vec![2.0 - 0.5 * 0.1 * 2.0, -1.0 + 0.5 * 0.1]);
    }

    #[test]
    fn first_step_is_lr() {
        let mut adam = Adam::new(0.0, WeightDecayMode::Decoupled);
        let mut p = vec![0.0];
        adam.update(&mut [&mut p], &[vec![1.0]], &names(1), 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_layer() {
        let mut adam = Adam::new(0.0, WeightDecayMode::Decoupled);
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        let err = adam
            .update(&mut [&mut a, &mut b], &[vec![1.0], vec![f64::NAN]], &names(2), 0.1)
            .unwrap_err();
        match err {
            Error::NanGradient { layer, step } => {
                assert_eq!(layer, "t1");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_shape() {
        let lr0 = 0.01;
        assert_eq!(lr_schedule(0, 2, 4, 10, lr0), lr0);
        assert_eq!(lr_schedule(19, 2, 4, 10, lr0), lr0);
        assert_eq!(lr_schedule(20, 2, 4, 10, lr0), lr0);
        assert!((lr_schedule(40, 2, 4, 10, lr0) - lr0 / 2.0).abs() < 1e-15);
        assert!(lr_schedule(60, 2, 4, 10, lr0).abs() < 1e-18);
        let mut prev = lr0;
        for t in 20..60 {
            let lr = lr_schedule(t, 2, 4, 10, lr0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
