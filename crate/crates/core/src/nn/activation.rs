use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient through `max(0, x)`, zero where `x <= 0`.
pub fn relu_backward<T: Scalar>(grad_y: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_shape!(grad_y.shape() == x.shape(), "relu gradient {} vs input {}", grad_y.shape(), x.shape());
    let mut gx = grad_y.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(gx)
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    y
}

/// Gradient through the sigmoid, given its output `y`.
pub fn sigmoid_backward<T: Scalar>(grad_y: &Tensor4<T>, y: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_shape!(grad_y.shape() == y.shape(), "sigmoid gradient {} vs output {}", grad_y.shape(), y.shape());
    let mut gx = grad_y.clone();
    for (g, &s) in gx.data_mut().iter_mut().zip(y.data()) {
        *g *= s * (T::one() - s);
    }
    Ok(gx)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))`.
pub fn bce_loss<T: Scalar>(probs: &[T], targets: &[T]) -> Result<f64> {
    ensure_shape!(
        probs.len() == targets.len() && !probs.is_empty(),
        "bce over {} predictions and {} targets",
        probs.len(),
        targets.len()
    );
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (p, y) = (clamp_prob(p.f64()), y.f64());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `dL/dp` of [`bce_loss`]; zero where the clamp is active.
pub fn bce_backward<T: Scalar>(probs: &[T], targets: &[T]) -> Result<Vec<T>> {
    ensure_shape!(
        probs.len() == targets.len() && !probs.is_empty(),
        "bce over {} predictions and {} targets",
        probs.len(),
        targets.len()
    );
    let count = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (p, y) = (p.f64(), y.f64());
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                T::zero()
            } else {
                T::of((p - y) / (p * (1.0 - p)) / count)
            }
        })
        .collect())
}
