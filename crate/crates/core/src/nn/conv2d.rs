use crate::error::{ensure_shape, Error, Result};
use crate::nn::im2col::{self, PatchSource};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Square-kernel convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        ensure_shape!(
            padded >= self.kernel,
            "input size {input} with padding {} is smaller than kernel {}",
            self.padding,
            self.kernel
        );
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

struct ConvPatches {
    c_in: usize,
    h: usize,
    w: usize,
    out_w: usize,
    out_pixels: usize,
    spec: ConvSpec,
}

impl ConvPatches {
    fn new(x: Shape4, spec: ConvSpec) -> Result<Self> {
        let out_h = spec.output_size(x.h)?;
        let out_w = spec.output_size(x.w)?;
        Ok(ConvPatches {
            c_in: x.c,
            h: x.h,
            w: x.w,
            out_w,
            out_pixels: out_h * out_w,
            spec,
        })
    }

    /// Input offset read by output pixel `pix` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, pix: usize, ky: usize, kx: usize) -> Option<usize> {
        let (oy, ox) = (pix / self.out_w, pix % self.out_w);
        let iy = (oy * self.spec.stride + ky) as isize - self.spec.padding as isize;
        let ix = (ox * self.spec.stride + kx) as isize - self.spec.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }
}

impl<T: Scalar> PatchSource<T> for ConvPatches {
    fn rows(&self) -> usize {
        self.c_in * self.spec.kernel * self.spec.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_pixels
    }

    fn in_item_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn gather(&self, _item: usize, x: &[T], start: usize, len: usize, col: &mut [T]) {
        let k = self.spec.kernel;
        let plane = self.h * self.w;
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                for j in 0..len {
                    let Some(src) = self.source(start + j, ky, kx) else {
                        continue;
                    };
                    for c in 0..self.c_in {
                        col[(c * k * k + tap) * len + j] = x[c * plane + src];
                    }
                }
            }
        }
    }

    fn scatter(&self, _item: usize, grad_col: &[T], start: usize, len: usize, grad_x: &mut [T]) {
        let k = self.spec.kernel;
        let plane = self.h * self.w;
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                for j in 0..len {
                    let Some(src) = self.source(start + j, ky, kx) else {
                        continue;
                    };
                    for c in 0..self.c_in {
                        grad_x[c * plane + src] += grad_col[(c * k * k + tap) * len + j];
                    }
                }
            }
        }
    }
}

fn check_weight<T: Scalar>(x: Shape4, weight: &Tensor4<T>, bias: &[T], spec: ConvSpec) -> Result<()> {
    let ws = weight.shape();
    ensure_shape!(
        ws.c == x.c && ws.h == spec.kernel && ws.w == spec.kernel,
        "weight {ws} does not fit input {x} with kernel {}",
        spec.kernel
    );
    ensure_shape!(bias.len() == ws.n, "bias of length {} for {} filters", bias.len(), ws.n);
    ensure_shape!(x.c > 0, "input has no channels");
    Ok(())
}

/// Cross-correlation with zero padding. `weight` is `C_out x C_in x k x k`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    spec: ConvSpec,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check_weight(xs, weight, bias, spec)?;
    let patches = ConvPatches::new(xs, spec)?;
    let c_out = weight.shape().n;
    let y = im2col::forward(&patches, x.data(), xs.n, weight.data(), bias, c_out);
    let out = Shape4::new(xs.n, c_out, spec.output_size(xs.h)?, spec.output_size(xs.w)?);
    Tensor4::from_vec(out, y)
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    spec: ConvSpec,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check_weight(xs, weight, grad_b, spec)?;
    let patches = ConvPatches::new(xs, spec)?;
    let c_out = weight.shape().n;
    let expect = Shape4::new(xs.n, c_out, spec.output_size(xs.h)?, spec.output_size(xs.w)?);
    ensure_shape!(grad_y.shape() == expect, "output gradient {} != {expect}", grad_y.shape());
    ensure_shape!(grad_w.len() == weight.shape().len(), "weight gradient length");
    let gx = im2col::backward(
        &patches,
        grad_y.data(),
        x.data(),
        xs.n,
        weight.data(),
        c_out,
        grad_w,
        grad_b,
        true,
    );
    Tensor4::from_vec(xs, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop definition.
    fn naive(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], spec: ConvSpec) -> Tensor4<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (oh, ow) = (spec.output_size(xs.h).unwrap(), spec.output_size(xs.w).unwrap());
        Tensor4::from_fn(Shape4::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..xs.c {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, 5, 4), 1.0, &mut rng);
        let w = Tensor4::from_fn(Shape4::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, &[0.0; 3], ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(3, 2, 1), ConvSpec::new(7, 2, 3), ConvSpec::new(3, 1, 0)] {
            let x = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, 8, 8), 1.0, &mut rng);
            let w = Tensor4::<f32>::random_uniform(Shape4::new(4, 3, spec.kernel, spec.kernel), 1.0, &mut rng);
            let b = [0.1f32, -0.2, 0.3, 0.0];
            let y = conv2d_forward(&x, &w, &b, spec).unwrap();
            let want = naive(&x.cast(), &w.cast(), &b.map(|v| v as f64), spec);
            assert!(y.cast::<f64>().max_abs_diff(&want) < 1e-5, "{spec:?}");
        }
    }

    #[test]
    fn large_map_crosses_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(3, 1, 1);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 20, 30), 1.0, &mut rng);
        let w = Tensor4::<f64>::random_uniform(Shape4::new(3, 2, 3, 3), 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, &[0.0; 3], spec).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &w, &[0.0; 3], spec)) < 1e-12);
    }

    #[test]
    fn rejects_mismatched_weight() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 4, 4));
        let w = Tensor4::<f32>::zeros(Shape4::new(1, 3, 3, 3));
        assert!(conv2d_forward(&x, &w, &[0.0], ConvSpec::new(3, 1, 1)).is_err());
        let w = Tensor4::<f32>::zeros(Shape4::new(1, 2, 5, 5));
        assert!(conv2d_forward(&x, &w, &[0.0], ConvSpec::new(5, 1, 0)).is_err());
        let x5 = Tensor4::<f32>::zeros(Shape4::new(1, 2, 5, 5));
        assert!(conv2d_forward(&x5, &w, &[0.0], ConvSpec::new(5, 1, 0)).is_ok());
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 3, 3));
        assert!(conv2d_forward(&x, &w, &[0.0], ConvSpec::new(5, 1, 0)).is_err());
    }
}
