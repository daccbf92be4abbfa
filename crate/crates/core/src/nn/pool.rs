use crate::error::{ensure_shape, Result};
use crate::nn::conv2d::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Max pooling result with the flat input index chosen for every output.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T> {
    pub y: Tensor4<T>,
    pub argmax: Vec<usize>,
}

/// Max over `k x k` windows. Padding cells never win; ties go to the first
/// element in row-major order.
pub fn maxpool2d_forward<T: Scalar>(x: &Tensor4<T>, spec: ConvSpec) -> Result<MaxPoolOutput<T>> {
    let xs = x.shape();
    ensure_shape!(
        spec.padding < spec.kernel,
        "pool padding {} must be smaller than kernel {}",
        spec.padding,
        spec.kernel
    );
    let (oh, ow) = (spec.output_size(xs.h)?, spec.output_size(xs.w)?);
    let out = Shape4::new(xs.n, xs.c, oh, ow);
    let mut y = Vec::with_capacity(out.len());
    let mut argmax = Vec::with_capacity(out.len());
    let data = x.data();
    for plane in 0..xs.n * xs.c {
        let base = plane * xs.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * xs.w + ix as usize;
                        let v = data[idx];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("every window overlaps the input");
                y.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok(MaxPoolOutput {
        y: Tensor4::from_vec(out, y)?,
        argmax,
    })
}

/// Routes each output gradient to its window's maximum.
pub fn maxpool2d_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    argmax: &[usize],
    input_shape: Shape4,
) -> Result<Tensor4<T>> {
    ensure_shape!(
        grad_y.shape().len() == argmax.len(),
        "gradient {} does not match {} pooled outputs",
        grad_y.shape(),
        argmax.len()
    );
    let mut gx = Tensor4::zeros(input_shape);
    let data = gx.data_mut();
    for (&g, &i) in grad_y.data().iter().zip(argmax) {
        data[i] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_pools_to_window_maxima() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let out = maxpool2d_forward(&x, ConvSpec::new(3, 2, 0)).unwrap();
        // (4 - 3) / 2 + 1 = 1 window per axis.
        assert_eq!(out.y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(out.y.data(), &[10.0]);
    }

    #[test]
    fn ramp_with_unit_stride() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let out = maxpool2d_forward(&x, ConvSpec::new(3, 1, 0)).unwrap();
        assert_eq!(out.y.data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn ramp_with_unit_padding() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let out = maxpool2d_forward(&x, ConvSpec::new(3, 2, 1)).unwrap();
        assert_eq!(out.y.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(out.y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor4::full(Shape4::new(2, 3, 9, 7), 1.5f32);
        let out = maxpool2d_forward(&x, ConvSpec::new(3, 2, 1)).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor4::full(Shape4::new(1, 1, 3, 3), 2.0f32);
        let out = maxpool2d_forward(&x, ConvSpec::new(3, 2, 0)).unwrap();
        assert_eq!(out.argmax, vec![0]);
        let g = Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0f32);
        let gx = maxpool2d_backward(&g, &out.argmax, x.shape()).unwrap();
        assert_eq!(gx.data()[0], 1.0);
        assert_eq!(gx.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 2));
        assert!(maxpool2d_forward(&x, ConvSpec::new(3, 2, 0)).is_err());
        assert!(maxpool2d_forward(&x, ConvSpec::new(3, 2, 1)).is_ok());
    }
}
