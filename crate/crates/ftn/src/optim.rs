//! Adam for adapter factors, SGD with momentum for everything else.

use std::collections::HashMap;

use ftn_core::layers::ParamKey;
use ftn_core::Tensor;

use crate::config::TrainConfig;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Adam,
    Sgd,
}

/// Every trainable key belongs to exactly one group.
pub fn group_of(key: ParamKey) -> Group {
    match key {
        ParamKey::Factor { .. } => Group::Adam,
        ParamKey::Gamma(_) | ParamKey::Beta(_) | ParamKey::HeadWeight | ParamKey::HeadBias | ParamKey::BackboneWeight(_) => {
            Group::Sgd
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Adam { m: Vec<f32>, v: Vec<f32>, t: i32 },
    Sgd { velocity: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    factor_lr: f64,
    sgd_lr: f64,
    momentum: f32,
    weight_decay: f32,
    state: HashMap<ParamKey, Slot>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            factor_lr: cfg.factor_lr,
            sgd_lr: cfg.sgd_lr,
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
            state: HashMap::new(),
        }
    }

    /// Updates `param` in place; `lr_scale` comes from the schedule.
    pub fn step(&mut self, key: ParamKey, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr_scale: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        let n = param.len();
        let wd = self.weight_decay;
        let slot = self.state.entry(key).or_insert_with(|| match group_of(key) {
            Group::Adam => Slot::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
            Group::Sgd => Slot::Sgd { velocity: vec![0.0; n] },
        });
        let p = param.data_mut();
        let g = grad.data();
        match slot {
            Slot::Adam { m, v, t } => {
                *t += 1;
                let lr = (self.factor_lr * lr_scale) as f32;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for i in 0..n {
                    let gi = g[i] + wd * p[i];
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
            Slot::Sgd { velocity } => {
                let lr = (self.sgd_lr * lr_scale) as f32;
                for i in 0..n {
                    let gi = g[i] + wd * p[i];
                    velocity[i] = self.momentum * velocity[i] + gi;
                    p[i] -= lr * velocity[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Schedule;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 1,
            factor_lr: 0.1,
            sgd_lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::new(&cfg());
        let mut p = Tensor::from_vec(&[2], vec![1.0f32, 1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![3.0f32, -0.01]).unwrap();
        opt.step(ParamKey::Factor { slot: 0, mode: 0 }, &mut p, &g, 1.0);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(&cfg());
        let mut p = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0f32]).unwrap();
        opt.step(ParamKey::HeadBias, &mut p, &g, 1.0);
        opt.step(ParamKey::HeadBias, &mut p, &g, 1.0);
        // v1 = 1, v2 = 1.5
        assert!((p.data()[0] + 0.25).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Schedule::Cosine.factor(0, 10), 1.0);
        assert!(Schedule::Cosine.factor(10, 10).abs() < 1e-12);
        assert!((Schedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-12);
    }
}
