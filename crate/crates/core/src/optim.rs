//! Adam with decoupled weight decay, reduce-on-plateau learning-rate
//! schedule and early stopping.

use serde::{Deserialize, Serialize};

use crate::model::CoordDrUNet;
use crate::nn::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates are kept in `f64` regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut CoordDrUNet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = self.lr;
        let decay = 1.0 - lr * c.weight_decay;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_params(|_, p| {
            if ms.len() <= i {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            i += 1;
            if !p.trainable {
                return;
            }
            for j in 0..p.len() {
                let g = p.grad[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let w = p.value[j].as_f64() * decay - update;
                p.value[j] = T::of(w);
            }
        });
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without strict improvement of the monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr: 1e-7,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records the loss of `epoch`. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return (true, false);
        }
        self.stale += 1;
        (false, self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = ReduceOnPlateau::new(30, 0.5);
        let mut lr = s.observe(1.0, 1e-3);
        for _ in 0..29 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-3);
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 5e-4);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn early_stop_halts_at_exact_epoch() {
        let mut es = EarlyStopping::new(50);
        assert_eq!(es.observe(0, 1.0), (true, false));
        let mut stopped = None;
        for epoch in 1..200 {
            if es.observe(epoch, 1.0).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(50));
        assert_eq!(es.best(), Some((0, 1.0)));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = ModelConfig {
            in_channels: 1,
            encoder_depth: 1,
            base_channels: 4,
            input_height: 8,
            input_width: 8,
            ..Default::default()
        };
        let mut net = CoordDrUNet::<f64>::new(cfg, 1).unwrap();
        let before = net.state();
        net.visit_params(|_, p| p.grad.fill(0.3));
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut net);
        let after = net.state();
        let mut checked = 0;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.contains("running") {
                continue;
            }
            for (x, y) in a.iter().zip(b) {
                assert!((x - y - 1e-3).abs() < 1e-9, "{name}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = ModelConfig {
            in_channels: 1,
            encoder_depth: 1,
            base_channels: 4,
            input_height: 8,
            input_width: 8,
            ..Default::default()
        };
        let mut net = CoordDrUNet::<f64>::new(cfg, 2).unwrap();
        let mut w0 = Vec::new();
        net.visit_params(|_, p| w0.extend_from_slice(&p.value));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut net);
        let mut w1 = Vec::new();
        net.visit_params(|_, p| w1.extend_from_slice(&p.value));
        for (a, b) in w0.iter().zip(&w1) {
            assert!((b - a * (1.0 - 1e-5)).abs() < 1e-15);
        }
    }
}
