use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Param;

/// Adam hyper-parameters. Weight decay is added to the gradient before the
/// moment updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter.
    pub fn step<'a, T: Scalar>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            if !p.trainable {
                continue;
            }
            let Param {
                tensor,
                first_moment,
                second_moment,
                ..
            } = p;
            let (value, grad) = tensor.value_and_grad_mut();
            for i in 0..value.len() {
                let w = value[i].f64();
                let g = grad[i].f64() + c.weight_decay * w;
                let m = c.beta1 * first_moment[i].f64() + (1.0 - c.beta1) * g;
                let v = c.beta2 * second_moment[i].f64() + (1.0 - c.beta2) * g * g;
                first_moment[i] = T::of(m);
                second_moment[i] = T::of(v);
                value[i] = T::of(w - c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor4};

    fn scalar_param(value: f32, grad: f32) -> Param<f32> {
        let mut p = Param::trainable("p", Tensor4::full(Shape4::new(1, 1, 1, 1), value));
        p.grad_mut()[0] = grad;
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step([&mut p]);
        assert!((p.value()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = scalar_param(0.25, 0.0);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..5 {
            adam.step([&mut p]);
        }
        assert_eq!(p.value()[0], 0.25);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut p = Param::buffer("running", Tensor4::full(Shape4::new(1, 1, 1, 1), 3.0f32));
        Adam::new(AdamConfig::default()).step([&mut p]);
        assert_eq!(p.value()[0], 3.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Param::trainable(
                "w",
                Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![0.3f32, -0.7, 1.1]).unwrap(),
            );
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..20 {
                let grads: Vec<f32> = p.value().iter().map(|w| w * 2.0 + k as f32 * 0.01).collect();
                p.grad_mut().copy_from_slice(&grads);
                adam.step([&mut p]);
            }
            p.value().to_vec()
        };
        assert_eq!(run(), run());
    }
}
