//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping. A non-positive or infinite `max_norm`
/// disables clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && max_norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `w ← w·(1 − lr·wd) − lr·g`
pub fn sgdw_step(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
    let decay = 1.0 - lr * weight_decay;
    for (w, g) in params.iter_mut().zip(grads) {
        *w = *w * decay - lr * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Hyper-parameters for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1.0e-3,
            weight_decay: 1.0e-5,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Learning-rate schedule over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to `min_factor` times it.
    Cosine { min_factor: f64 },
}

impl LrSchedule {
    /// Multiplier for step `step` (0-based) of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { min_factor } => {
                if total <= 1 {
                    return 1.0;
                }
                let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
                min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// Optimizer state for one flat parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    lr_factor: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimConfig, n_params: usize) -> Self {
        let n = if cfg.kind == OptimizerKind::Adamw { n_params } else { 0 };
        Self {
            cfg,
            lr_factor: 1.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Scales the configured learning rate for subsequent steps.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.lr_factor = factor;
    }

    /// Clips `grads` in place then updates `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) {
        debug_assert_eq!(params.len(), grads.len());
        clip_global_norm(grads, self.cfg.clip_norm);
        let OptimConfig { lr, weight_decay, .. } = self.cfg;
        let lr = lr * self.lr_factor;
        match self.cfg.kind {
            OptimizerKind::Sgd => sgdw_step(params, grads, lr, weight_decay),
            OptimizerKind::Adamw => {
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t);
                let bc2 = 1.0 - BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * (weight_decay * params[i] + mhat / (vhat.sqrt() + EPS));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = [0.3, 0.4];
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.5);
        assert_eq!(g, [0.3, 0.4]);
        let mut g = [3.0, 4.0];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_has_unit_magnitude() {
        let cfg = OptimConfig {
            kind: OptimizerKind::Adamw,
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: 0.0,
        };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = [1.0, 1.0];
        opt.step(&mut p, &mut [5.0, -0.01]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_only_decays() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let cfg = OptimConfig {
                kind,
                lr: 0.1,
                weight_decay: 0.5,
                clip_norm: 1.0,
            };
            let mut opt = Optimizer::new(cfg, 1);
            let mut p = [2.0];
            opt.step(&mut p, &mut [0.0]);
            assert!((p[0] - 1.9).abs() < 1e-12, "{kind:?}");
        }
    }
}
