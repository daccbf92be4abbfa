//! Dense `N x C x H x W` storage and trainable parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major feature tensor with an optional gradient plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        ensure_shape!(
            data.len() == shape.len(),
            "buffer of {} elements for shape {shape}",
            data.len()
        );
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    /// Uniform values in `[-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape4, scale: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::of(rng.gen_range(-scale..scale)))
            .collect();
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    /// Normal values with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.shape.index(n, c, y, x);
        &mut self.data[i]
    }

    /// One batch item as a contiguous `C x H x W` slice.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        ensure_shape!(
            shape.len() == self.shape.len(),
            "cannot reshape {} into {shape}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// The gradient plane, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Split borrow of values and the (allocated) gradient plane.
    pub fn value_and_grad_mut(&mut self) -> (&mut [T], &mut [T]) {
        let len = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); len]);
        (&mut self.data, grad)
    }

    /// Runs `f` with the tensor borrowed read-only and its gradient plane
    /// borrowed mutably.
    pub fn with_grad<R>(&mut self, f: impl FnOnce(&Tensor4<T>, &mut [T]) -> R) -> R {
        let len = self.data.len();
        let mut grad = self.grad.take().unwrap_or_else(|| vec![T::zero(); len]);
        let out = f(self, &mut grad);
        self.grad = Some(grad);
        out
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named trainable (or running-statistic) tensor with Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor4<T>,
    pub trainable: bool,
    pub(crate) first_moment: Vec<T>,
    pub(crate) second_moment: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(name: impl Into<String>, mut tensor: Tensor4<T>) -> Self {
        let len = tensor.shape().len();
        tensor.grad_mut();
        Param {
            name: name.into(),
            tensor,
            trainable: true,
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
        }
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(name: impl Into<String>, tensor: Tensor4<T>) -> Self {
        Param {
            name: name.into(),
            tensor,
            trainable: false,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn value(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn grad(&self) -> &[T] {
        self.tensor.grad().unwrap_or(&[])
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.tensor.grad_mut()
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }

    pub fn len(&self) -> usize {
        self.tensor.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            tensor: self.tensor.cast(),
            trainable: self.trainable,
            first_moment: self.first_moment.iter().map(|v| U::of(v.f64())).collect(),
            second_moment: self.second_moment.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major() {
        let s = Shape4::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), s.len() - 1);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_is_lazily_allocated_and_cleared() {
        let mut t = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 2));
        assert!(t.grad().is_none());
        t.grad_mut()[3] = 2.0;
        assert_eq!(t.grad().unwrap()[3], 2.0);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
