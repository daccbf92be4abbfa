use crate::error::{ensure_shape, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::{Shape4, Tensor4};

/// `y = x W^T + b` with each batch item flattened. `weight` is `out x in`
/// stored as `out x in x 1 x 1`; the output is `N x out x 1 x 1`.
pub fn linear_forward<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let (out, inp) = (weight.shape().n, weight.shape().item_len());
    ensure_shape!(xs.item_len() == inp, "linear layer takes {inp} features, input is {xs}");
    ensure_shape!(bias.len() == out, "bias of length {} for {out} outputs", bias.len());
    let mut y = vec![T::zero(); xs.n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(xs.n, inp, out, x.data(), Trans::No, weight.data(), Trans::Yes, T::one(), &mut y);
    Tensor4::from_vec(Shape4::new(xs.n, out, 1, 1), y)
}

/// Accumulates weight and bias gradients; returns `dL/dx` in `x`'s shape.
pub fn linear_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let (out, inp) = (weight.shape().n, weight.shape().item_len());
    ensure_shape!(
        grad_y.shape().len() == xs.n * out,
        "linear gradient {} for batch {} x {out}",
        grad_y.shape(),
        xs.n
    );
    let gy = grad_y.data();
    gemm(out, xs.n, inp, gy, Trans::Yes, x.data(), Trans::No, T::one(), grad_w);
    for row in gy.chunks(out) {
        grad_b.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
    }
    let mut gx = vec![T::zero(); xs.len()];
    gemm(xs.n, out, inp, gy, Trans::No, weight.data(), Trans::No, T::zero(), &mut gx);
    Tensor4::from_vec(xs, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_affine_map() {
        let x = Tensor4::from_vec(Shape4::new(2, 3, 1, 1), vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor4::from_vec(Shape4::new(2, 3, 1, 1), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = linear_forward(&x, &w, &[0.5, -0.5]).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5, -0.5, -0.5]);

        let g = Tensor4::full(y.shape(), 1.0);
        let (mut gw, mut gb) = (vec![0.0; 6], vec![0.0; 2]);
        let gx = linear_backward(&g, &x, &w, &mut gw, &mut gb).unwrap();
        assert_eq!(gb, vec![2.0, 2.0]);
        assert_eq!(gw, vec![0.0, 2.0, 4.0, 0.0, 2.0, 4.0]);
        assert_eq!(gx.data(), &[2.0, 1.0, 1.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn flattens_spatial_input() {
        let x = Tensor4::<f32>::full(Shape4::new(1, 2, 2, 2), 1.0);
        let w = Tensor4::<f32>::full(Shape4::new(1, 8, 1, 1), 0.25);
        assert_eq!(linear_forward(&x, &w, &[0.0]).unwrap().data(), &[2.0]);
        let w = Tensor4::<f32>::full(Shape4::new(1, 7, 1, 1), 0.25);
        assert!(linear_forward(&x, &w, &[0.0]).is_err());
    }
}
