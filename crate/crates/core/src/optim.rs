//! Momentum SGD with per-group learning rates, and the trade-off schedule.

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::model::{Gradients, ModelParams, ParamGroup};

/// Learning-rate multipliers per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMultipliers {
    pub backbone: f64,
    pub head: f64,
}

impl LrMultipliers {
    /// Added layers train 10x slower than the backbone.
    pub const HEAD_SLOWER: LrMultipliers = LrMultipliers {
        backbone: 1.0,
        head: 0.1,
    };
    /// Added layers train 10x faster than the backbone.
    pub const HEAD_FASTER: LrMultipliers = LrMultipliers {
        backbone: 1.0,
        head: 10.0,
    };

    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Head => self.head,
        }
    }
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self::HEAD_SLOWER
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: Vec<Vec<f64>>,
    pub iteration: usize,
    pub max_iter: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_mult: LrMultipliers,
}

impl OptimizerState {
    pub fn new(
        params: &ModelParams,
        max_iter: usize,
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        lr_mult: LrMultipliers,
    ) -> Self {
        OptimizerState {
            momentum_buffers: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            iteration: 0,
            max_iter,
            base_lr,
            momentum,
            weight_decay,
            lr_mult,
        }
    }
}

/// One step of `v <- mu v + (g + wd theta)`, `theta <- theta - lr_group v`.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.tensors.len() != tensors.len() || opt.momentum_buffers.len() != tensors.len() {
        return Err(AltError::DimensionMismatch {
            context: "optimizer tensor count",
            expected: tensors.len(),
            got: grads.tensors.len().min(opt.momentum_buffers.len()),
        });
    }
    for ((t, g), v) in tensors
        .iter()
        .zip(&grads.tensors)
        .zip(&opt.momentum_buffers)
    {
        if g.len() != t.data.len() || v.len() != t.data.len() {
            return Err(AltError::DimensionMismatch {
                context: "gradient shape",
                expected: t.data.len(),
                got: g.len(),
            });
        }
    }
    for ((t, g), v) in tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(opt.momentum_buffers.iter_mut())
    {
        let lr = opt.base_lr * opt.lr_mult.for_group(t.group);
        for ((theta, gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let d = gi + opt.weight_decay * *theta;
            *vi = opt.momentum * *vi + d;
            *theta -= lr * *vi;
        }
    }
    opt.iteration = (opt.iteration + 1).min(opt.max_iter);
    Ok(())
}

/// `(1 + 10 iter / max_iter)^(-beta)`.
pub fn lambda_schedule(iter: usize, max_iter: usize, beta: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(AltError::invalid("lambda schedule needs max_iter > 0"));
    }
    if iter > max_iter {
        return Err(AltError::invalid(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    if !(beta >= 0.0) {
        return Err(AltError::invalid("lambda schedule exponent must be >= 0"));
    }
    Ok((1.0 + 10.0 * iter as f64 / max_iter as f64).powf(-beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn params() -> ModelParams {
        ModelParams::init(
            ModelDims {
                input_dim: 2,
                hidden_dim: 3,
                feature_dim: 3,
                bottleneck_dim: Some(2),
                num_classes: 2,
            },
            3,
        )
        .unwrap()
    }

    fn constant_grads(p: &ModelParams, v: f64) -> Gradients {
        Gradients {
            tensors: p.tensors().iter().map(|t| vec![v; t.data.len()]).collect(),
        }
    }

    const FLAT: LrMultipliers = LrMultipliers {
        backbone: 1.0,
        head: 1.0,
    };

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = params();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 10, 0.1, 0.9, 0.0, FLAT);
        sgd_update(&mut p, &constant_grads(&before, 0.0), &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.iteration, 1);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut p = params();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 10, 0.0, 0.9, 0.005, LrMultipliers::default());
        sgd_update(&mut p, &constant_grads(&before, 1.7), &mut opt).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn vanilla_step() {
        let mut p = params();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 10, 0.05, 0.0, 0.0, FLAT);
        sgd_update(&mut p, &constant_grads(&before, 2.0), &mut opt).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, y - 0.05 * 2.0);
            }
        }
    }

    #[test]
    fn momentum_second_displacement() {
        let mut p = params();
        let mut opt = OptimizerState::new(&p, 10, 0.01, 0.9, 0.0, FLAT);
        let g = constant_grads(&p, 0.5);
        sgd_update(&mut p, &g, &mut opt).unwrap();
        let mid = p.clone();
        sgd_update(&mut p, &g, &mut opt).unwrap();
        for (a, b) in p.tensors().iter().zip(mid.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(((y - x) - 0.01 * 0.5 * 1.9).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn group_multipliers_apply() {
        let mut p = params();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 10, 1.0, 0.0, 0.0, LrMultipliers::HEAD_SLOWER);
        sgd_update(&mut p, &constant_grads(&before, 1.0), &mut opt).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            let expect = match a.group {
                ParamGroup::Backbone => 1.0,
                ParamGroup::Head => 0.1,
            };
            assert!(
                ((b.data[0] - a.data[0]) - expect).abs() < 1e-12,
                "{}",
                a.name
            );
        }
    }

    #[test]
    fn weight_decay_enters_before_momentum() {
        let mut p = params();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 10, 0.1, 0.9, 0.5, FLAT);
        sgd_update(&mut p, &constant_grads(&before, 0.0), &mut opt).unwrap();
        let w0 = before.tensors()[0].data[0];
        assert!((p.tensors()[0].data[0] - (w0 - 0.1 * 0.5 * w0)).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        for b in [0.0, 0.5, 2.0, 5.0] {
            assert_eq!(lambda_schedule(0, 100, b).unwrap(), 1.0);
        }
        for it in [0, 13, 100] {
            assert_eq!(lambda_schedule(it, 100, 0.0).unwrap(), 1.0);
        }
        let v = lambda_schedule(100, 100, 2.0).unwrap();
        assert!((v - 1.0 / 121.0).abs() < 1e-12);
        assert!(lambda_schedule(0, 0, 1.0).is_err());
        assert!(lambda_schedule(5, 4, 1.0).is_err());
    }
}
