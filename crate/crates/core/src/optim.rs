//! First-order optimizers and the warmup + step-decay learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Sgd {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state sized to a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(invalid("optimizer state does not match the parameter store"));
        }
        self.steps += 1;
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = store.tensor_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let v = &mut self.first[i];
                    for k in 0..p.len() {
                        let d = g.map_or(0.0, |g| g[k]) + weight_decay * p[k];
                        v[k] = momentum * v[k] + d;
                        p[k] -= lr * v[k];
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - libm::powf(beta1, t as f32);
                    let c2 = 1.0 - libm::powf(beta2, t as f32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for k in 0..p.len() {
                        let d = g.map_or(0.0, |g| g[k]) + weight_decay * p[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * d;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * d * d;
                        p[k] -= lr * (m[k] / c1) / (libm::sqrtf(v[k] / c2) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_ratio * base_lr`, then multiplied by `gamma`
/// at each milestone iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_iters: usize,
    pub warmup_ratio: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: usize) -> f32 {
        let decays = self.milestones.iter().filter(|&&m| iter >= m).count();
        let lr = self.base_lr * libm::powf(self.gamma, decays as f32);
        if iter < self.warmup_iters {
            let frac = iter as f32 / self.warmup_iters as f32;
            lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * frac)
        } else {
            lr
        }
    }
}

/// Warmup length for a run of `total_iters`: 500, or a tenth of the run if
/// that is shorter.
pub fn default_warmup(total_iters: usize) -> usize {
    500.min(total_iters / 10)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f32) -> f32 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule {
            base_lr: 0.01,
            warmup_iters: 10,
            warmup_ratio: 0.1,
            milestones: vec![20, 30],
            gamma: 0.1,
        };
        assert!((s.lr_at(0) - 0.001).abs() < 1e-9);
        assert!((s.lr_at(10) - 0.01).abs() < 1e-9);
        assert!((s.lr_at(25) - 0.001).abs() < 1e-9);
        assert!((s.lr_at(30) - 0.0001).abs() < 1e-9);
        assert_eq!(default_warmup(100_000), 500);
        assert_eq!(default_warmup(1000), 100);
    }

    fn quadratic_descent(kind: OptimizerKind, lr: f32) -> f32 {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Optimizer::new(kind, &store);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let l = g.mean_square(x);
                g.backward(l).params(&g)
            };
            opt.step(&mut store, &grads, lr).unwrap();
        }
        store.tensor(id).data().iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    #[test]
    fn optimizers_minimise_a_quadratic() {
        let sgd = OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(quadratic_descent(sgd, 0.1) < 1e-3);
        let adam = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        assert!(quadratic_descent(adam, 0.05) < 1e-2);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let l = g.mean_square(x);
        let mut grads = g.backward(l).params(&g);
        assert!((clip_grad_norm(&mut grads, 1.0) - 50.0).abs() < 1e-3);
        assert!(grads.global_norm() <= 1.0 + 1e-5);
    }
}
