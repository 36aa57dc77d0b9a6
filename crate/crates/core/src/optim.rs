//! SGD with momentum and LARS.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum,
    /// Layer-wise trust ratio `‖p‖ / ‖g + wd·p‖` scales each tensor's step.
    Lars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: Float,
    pub momentum: Float,
    pub weight_decay: Float,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so schedules can decay to zero.
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    velocity: Vec<Vec<Float>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Result<Self> {
        config.validate()?;
        let velocity = params.entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self { config, velocity })
    }

    pub fn set_learning_rate(&mut self, lr: Float) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. `grads[i]` belongs to `params.entries[i]`; a
    /// missing gradient is treated as zero.
    ///
    /// SGD: `v ← m·v + g + wd·p; p ← p − lr·v`.
    /// LARS: the `g + wd·p` term is scaled by `‖p‖ / ‖g + wd·p‖` per tensor.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, _), g) in params.entries.iter().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { param: name.clone() });
                }
            }
        }
        let OptimizerConfig {
            kind,
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
        } = self.config;
        for (((_, p), g), v) in params.entries.iter_mut().zip(grads).zip(&mut self.velocity) {
            let pd = p.data_mut();
            let update: Vec<Float> = match g {
                Some(g) => g.data().iter().zip(pd.iter()).map(|(gi, pi)| gi + wd * pi).collect(),
                None => pd.iter().map(|pi| wd * pi).collect(),
            };
            let scale = match kind {
                OptimizerKind::SgdMomentum => 1.0,
                OptimizerKind::Lars => {
                    let (pn, un) = (float::norm(pd), float::norm(&update));
                    if pn > 0.0 && un > 0.0 {
                        pn / un
                    } else {
                        1.0
                    }
                }
            };
            for ((vi, ui), pi) in v.iter_mut().zip(&update).zip(pd.iter_mut()) {
                *vi = m * *vi + scale * ui;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn scalar_params(v: Float) -> Params {
        Params {
            entries: vec![("w".to_string(), Tensor::new(&[1], vec![v]).unwrap())],
        }
    }

    fn grad(v: Float) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = scalar_params(1.5);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(&grad(3.0))]).unwrap();
        assert_eq!(p.entries[0].1.data(), &[1.5]);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = scalar_params(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            kind: OptimizerKind::SgdMomentum,
        };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(&grad(2.0))]).unwrap();
        assert!((p.entries[0].1.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps_follow_recurrence() {
        // p0 = 1, g = 0.5 then 0.25, m = 0.9, wd = 0.01, lr = 0.1
        // v1 = 0.5 + 0.01*1 = 0.51;            p1 = 1 - 0.051 = 0.949
        // v2 = 0.9*0.51 + 0.25 + 0.01*0.949 = 0.71849; p2 = 0.949 - 0.071849 = 0.877151
        let mut p = scalar_params(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            kind: OptimizerKind::SgdMomentum,
        };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(&grad(0.5))]).unwrap();
        assert!((p.entries[0].1.data()[0] - 0.949).abs() < 1e-6);
        opt.step(&mut p, &[Some(&grad(0.25))]).unwrap();
        assert!((p.entries[0].1.data()[0] - 0.877151).abs() < 1e-6);
    }

    #[test]
    fn lars_scales_by_trust_ratio() {
        // ‖p‖ = 2, update = g = 4 → trust 0.5, step = lr * 0.5 * 4 = 0.2
        let mut p = scalar_params(2.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            kind: OptimizerKind::Lars,
        };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(&grad(4.0))]).unwrap();
        assert!((p.entries[0].1.data()[0] - 1.8).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p).unwrap();
        let err = opt.step(&mut p, &[Some(&grad(Float::NAN))]).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { param: "w".into() });
        assert_eq!(p.entries[0].1.data(), &[1.0]);
    }

    #[test]
    fn invalid_config_rejected() {
        let p = scalar_params(1.0);
        let cfg = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(Optimizer::new(cfg, &p).is_err());
        let cfg = OptimizerConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(Optimizer::new(cfg, &p).is_err());
    }
}
