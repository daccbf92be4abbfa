//! Dense kernels with hand-written backward passes, and the parameterized
//! layers built from them.
//!
//! Backward functions add into parameter gradients and return fresh input
//! gradients; call `zero_grad` between steps.

pub mod activation;
pub mod adam;
pub mod conv2d;
pub(crate) mod im2col;
pub mod linear;
pub mod norm;
pub mod pool;

use rand::Rng;

pub use activation::{
    bce_backward, bce_loss, relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward,
};
pub use adam::{Adam, AdamConfig};
pub use conv2d::{conv2d_backward, conv2d_forward, ConvSpec};
pub use linear::{linear_backward, linear_forward};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormCache, RunningStats};
pub use pool::{maxpool2d_backward, maxpool2d_forward, MaxPoolOutput};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Param, Shape4, Tensor4};

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
fn kaiming<T: Scalar, R: Rng + ?Sized>(name: &str, shape: Shape4, rng: &mut R) -> (Param<T>, Param<T>) {
    let fan_in = shape.item_len().max(1);
    let w = Tensor4::random_normal(shape, (2.0 / fan_in as f64).sqrt(), rng);
    let b = Tensor4::zeros(Shape4::new(1, 1, 1, shape.n));
    (
        Param::trainable(format!("{name}.weight"), w),
        Param::trainable(format!("{name}.bias"), b),
    )
}

#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, spec: ConvSpec, rng: &mut R) -> Self {
        let (weight, bias) = kaiming(name, Shape4::new(c_out, c_in, spec.kernel, spec.kernel), rng);
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(x, &self.weight.tensor, self.bias.value(), self.spec)
    }

    pub fn backward(&mut self, grad_y: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let spec = self.spec;
        let gb = self.bias.grad_mut();
        self.weight
            .tensor
            .with_grad(|w, gw| conv2d_backward(grad_y, x, w, spec, gw, gb))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            spec: self.spec,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let shape = Shape4::new(1, 1, 1, channels);
        BatchNorm {
            gamma: Param::trainable(format!("{name}.gamma"), Tensor4::full(shape, T::one())),
            beta: Param::trainable(format!("{name}.beta"), Tensor4::zeros(shape)),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor4::zeros(shape)),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor4::full(shape, T::one())),
        }
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running averages.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        let running = RunningStats {
            mean: self.running_mean.value(),
            var: self.running_var.value(),
        };
        let (y, cache, stats) = batchnorm_forward(x, self.gamma.value(), self.beta.value(), running, true)?;
        let (mean, var) = stats.expect("training mode returns batch statistics");
        norm::update_running(self.running_mean.tensor.data_mut(), &mean);
        norm::update_running(self.running_var.tensor.data_mut(), &var);
        Ok((y, cache))
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        let running = RunningStats {
            mean: self.running_mean.value(),
            var: self.running_var.value(),
        };
        let (y, cache, _) = batchnorm_forward(x, self.gamma.value(), self.beta.value(), running, false)?;
        Ok((y, cache))
    }

    pub fn backward(&mut self, grad_y: &Tensor4<T>, cache: &BatchNormCache<T>) -> Result<Tensor4<T>> {
        let gb = self.beta.grad_mut();
        self.gamma
            .tensor
            .with_grad(|g, gg| batchnorm_backward(grad_y, cache, g.data(), gg, gb))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let (weight, bias) = kaiming(name, Shape4::new(outputs, inputs, 1, 1), rng);
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        linear_forward(x, &self.weight.tensor, self.bias.value())
    }

    pub fn backward(&mut self, grad_y: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let gb = self.bias.grad_mut();
        self.weight
            .tensor
            .with_grad(|w, gw| linear_backward(grad_y, x, w, gw, gb))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
