//! Convolution in the conic space of a candidate vanishing point.
//!
//! At output pixel `p` the 3x3 sampling grid is rotated so that its x-axis
//! points at the vanishing point `v`:
//!
//! ```text
//! t = (v - p) / |v - p|,   R t = (-t_y, t_x)
//! y(p) = b + sum_{dx, dy in {-1,0,1}} w[dy+1][dx+1] * x(p + dx t + dy R t)
//! ```
//!
//! Off-grid samples are read with bilinear interpolation and zero padding.
//! With `v` far away along +x the grid is the ordinary 3x3 stencil, so the
//! operator reduces to a plain padded convolution.

use rand::Rng;

use crate::error::{ensure_shape, Result};
use crate::geometry::ImagePoint;
use crate::nn::im2col::{self, PatchSource};
use crate::scalar::Scalar;
use crate::tensor::{Param, Shape4, Tensor4};

/// Below this pixel-to-`v` distance the frame falls back to `t = (1, 0)`.
pub const SINGULAR_EPS: f64 = 1e-6;

const TAPS: usize = 9;

#[derive(Debug, Clone, Copy)]
struct Corner<T> {
    index: u32,
    weight: T,
}

/// Per-pixel conic axes for one feature-map size and one vanishing point,
/// plus the bilinear sampling plan derived from them.
#[derive(Debug, Clone)]
pub struct ConicFrame<T = f32> {
    height: usize,
    width: usize,
    vanishing: ImagePoint,
    axes: Vec<[f64; 2]>,
    // (tap * plane + pixel) * 4 + corner; out-of-grid corners have weight 0
    plan: Vec<Corner<T>>,
}

/// Builds the frame for an `height x width` map. `v` is in the map's own
/// pixel coordinates (image coordinates divided by the cumulative stride).
pub fn build_conic_frame<T: Scalar>(height: usize, width: usize, v: ImagePoint) -> ConicFrame<T> {
    let plane = height * width;
    let mut axes = Vec::with_capacity(plane);
    for py in 0..height {
        for px in 0..width {
            let (dx, dy) = (v.u - px as f64, v.v - py as f64);
            let norm = dx.hypot(dy);
            axes.push(if norm < SINGULAR_EPS || !norm.is_finite() {
                [1.0, 0.0]
            } else {
                [dx / norm, dy / norm]
            });
        }
    }
    let zero = Corner {
        index: 0,
        weight: T::zero(),
    };
    let mut plan = vec![zero; TAPS * plane * 4];
    for tap in 0..TAPS {
        let (ddx, ddy) = ((tap % 3) as f64 - 1.0, (tap / 3) as f64 - 1.0);
        for (pix, t) in axes.iter().enumerate() {
            let (px, py) = ((pix % width) as f64, (pix / width) as f64);
            let qx = px + ddx * t[0] - ddy * t[1];
            let qy = py + ddx * t[1] + ddy * t[0];
            let (x0, y0) = (qx.floor(), qy.floor());
            let (fx, fy) = (qx - x0, qy - y0);
            let base = (tap * plane + pix) * 4;
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (k, &(cx, cy, w)) in corners.iter().enumerate() {
                if cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64 {
                    plan[base + k] = Corner {
                        index: (cy as usize * width + cx as usize) as u32,
                        weight: T::of(w),
                    };
                }
            }
        }
    }
    ConicFrame {
        height,
        width,
        vanishing: v,
        axes,
        plan,
    }
}

impl<T: Scalar> ConicFrame<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vanishing_point(&self) -> ImagePoint {
        self.vanishing
    }

    /// Unit vector from pixel `(x, y)` toward the vanishing point.
    pub fn axis(&self, x: usize, y: usize) -> [f64; 2] {
        self.axes[y * self.width + x]
    }

    /// The axis rotated by +90 degrees: `(-t_y, t_x)`.
    pub fn normal(&self, x: usize, y: usize) -> [f64; 2] {
        let t = self.axis(x, y);
        [-t[1], t[0]]
    }
}

/// Zero-padded bilinear read of one channel plane.
fn bilinear(plane: &[f64], width: usize, height: usize, qx: f64, qy: f64) -> f64 {
    let (x0, y0) = (qx.floor(), qy.floor());
    let (fx, fy) = (qx - x0, qy - y0);
    let read = |x: f64, y: f64| {
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            0.0
        } else {
            plane[y as usize * width + x as usize]
        }
    };
    read(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + read(x0 + 1.0, y0) * fx * (1.0 - fy)
        + read(x0, y0 + 1.0) * (1.0 - fx) * fy
        + read(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// A 3x3 conic convolution layer; same parameter count as a plain 3x3
/// convolution.
#[derive(Debug, Clone)]
pub struct ConicConvLayer<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConicConvLayer<T> {
    /// Kaiming-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let shape = Shape4::new(c_out, c_in, 3, 3);
        let std = (2.0 / (c_in * TAPS).max(1) as f64).sqrt();
        ConicConvLayer {
            weight: Param::trainable(format!("{name}.weight"), Tensor4::random_normal(shape, std, rng)),
            bias: Param::trainable(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, 1, 1, c_out))),
        }
    }

    pub fn from_parts(weight: Param<T>, bias: Param<T>) -> Result<Self> {
        let ws = weight.tensor.shape();
        ensure_shape!(ws.h == 3 && ws.w == 3, "conic kernels are 3x3, got {ws}");
        ensure_shape!(bias.len() == ws.n, "bias of length {} for {} filters", bias.len(), ws.n);
        Ok(ConicConvLayer { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape().n
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor4<T>, frames: &[ConicFrame<T>]) -> Result<Tensor4<T>> {
        conic_conv_fast(x, frames, self)
    }

    pub fn backward(&mut self, grad_y: &Tensor4<T>, x: &Tensor4<T>, frames: &[ConicFrame<T>]) -> Result<Tensor4<T>> {
        conic_conv_backward(grad_y, x, frames, self)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> ConicConvLayer<U> {
        ConicConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// `frames` holds either one frame shared by every batch item or one per
/// item.
fn check<T: Scalar>(x: Shape4, frames: &[ConicFrame<T>], layer: &ConicConvLayer<T>) -> Result<()> {
    ensure_shape!(x.c > 0, "conic convolution needs at least one input channel");
    ensure_shape!(
        layer.in_channels() == x.c,
        "layer expects {} channels, input is {x}",
        layer.in_channels()
    );
    ensure_shape!(
        frames.len() == 1 || frames.len() == x.n,
        "{} frames for a batch of {}",
        frames.len(),
        x.n
    );
    for f in frames {
        ensure_shape!(
            f.height == x.h && f.width == x.w,
            "frame {}x{} does not match input {x}",
            f.height,
            f.width
        );
    }
    Ok(())
}

fn frame_for<T>(frames: &[ConicFrame<T>], item: usize) -> &ConicFrame<T> {
    if frames.len() == 1 {
        &frames[0]
    } else {
        &frames[item]
    }
}

/// Naive per-pixel evaluation of the definition. Slow; the oracle for
/// [`conic_conv_fast`].
pub fn conic_conv_reference<T: Scalar>(
    x: &Tensor4<T>,
    frames: &[ConicFrame<T>],
    layer: &ConicConvLayer<T>,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check(xs, frames, layer)?;
    let c_out = layer.out_channels();
    let w = layer.weight.value();
    let b = layer.bias.value();
    let plane = xs.plane();
    let xd: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    let mut y = Tensor4::zeros(Shape4::new(xs.n, c_out, xs.h, xs.w));
    for n in 0..xs.n {
        let frame = frame_for(frames, n);
        for co in 0..c_out {
            for py in 0..xs.h {
                for px in 0..xs.w {
                    let t = frame.axis(px, py);
                    let r = frame.normal(px, py);
                    let mut acc = b[co].f64();
                    for ci in 0..xs.c {
                        let src = &xd[(n * xs.c + ci) * plane..(n * xs.c + ci + 1) * plane];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (dx, dy) = (kx as f64 - 1.0, ky as f64 - 1.0);
                                let qx = px as f64 + dx * t[0] + dy * r[0];
                                let qy = py as f64 + dx * t[1] + dy * r[1];
                                let wv = w[((co * xs.c + ci) * 3 + ky) * 3 + kx].f64();
                                acc += wv * bilinear(src, xs.w, xs.h, qx, qy);
                            }
                        }
                    }
                    *y.at_mut(n, co, py, px) = T::of(acc);
                }
            }
        }
    }
    Ok(y)
}

struct ConicPatches<'a, T> {
    frames: &'a [ConicFrame<T>],
    c_in: usize,
    plane: usize,
}

impl<T: Scalar> PatchSource<T> for ConicPatches<'_, T> {
    fn rows(&self) -> usize {
        self.c_in * TAPS
    }

    fn out_pixels(&self) -> usize {
        self.plane
    }

    fn in_item_len(&self) -> usize {
        self.c_in * self.plane
    }

    fn gather(&self, item: usize, x: &[T], start: usize, len: usize, col: &mut [T]) {
        let plan = &frame_for(self.frames, item).plan;
        for c in 0..self.c_in {
            let src = &x[c * self.plane..(c + 1) * self.plane];
            for tap in 0..TAPS {
                let row = &mut col[(c * TAPS + tap) * len..(c * TAPS + tap + 1) * len];
                let corners = &plan[(tap * self.plane + start) * 4..(tap * self.plane + start + len) * 4];
                for (out, q) in row.iter_mut().zip(corners.chunks_exact(4)) {
                    *out = q[0].weight * src[q[0].index as usize]
                        + q[1].weight * src[q[1].index as usize]
                        + q[2].weight * src[q[2].index as usize]
                        + q[3].weight * src[q[3].index as usize];
                }
            }
        }
    }

    fn scatter(&self, item: usize, grad_col: &[T], start: usize, len: usize, grad_x: &mut [T]) {
        let plan = &frame_for(self.frames, item).plan;
        for c in 0..self.c_in {
            let dst = &mut grad_x[c * self.plane..(c + 1) * self.plane];
            for tap in 0..TAPS {
                let row = &grad_col[(c * TAPS + tap) * len..(c * TAPS + tap + 1) * len];
                let corners = &plan[(tap * self.plane + start) * 4..(tap * self.plane + start + len) * 4];
                for (&g, q) in row.iter().zip(corners.chunks_exact(4)) {
                    for corner in q {
                        dst[corner.index as usize] += corner.weight * g;
                    }
                }
            }
        }
    }
}

/// Patch-matrix evaluation: gathers the `9 * C_in` bilinear samples of each
/// pixel tile from the frame's plan and multiplies by the weight matrix.
pub fn conic_conv_fast<T: Scalar>(
    x: &Tensor4<T>,
    frames: &[ConicFrame<T>],
    layer: &ConicConvLayer<T>,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check(xs, frames, layer)?;
    let source = ConicPatches {
        frames,
        c_in: xs.c,
        plane: xs.plane(),
    };
    let c_out = layer.out_channels();
    let y = im2col::forward(&source, x.data(), xs.n, layer.weight.value(), layer.bias.value(), c_out);
    Tensor4::from_vec(Shape4::new(xs.n, c_out, xs.h, xs.w), y)
}

/// Accumulates weight and bias gradients into `layer` and returns `dL/dx`.
/// No gradient flows to the vanishing point.
pub fn conic_conv_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    x: &Tensor4<T>,
    frames: &[ConicFrame<T>],
    layer: &mut ConicConvLayer<T>,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check(xs, frames, layer)?;
    let c_out = layer.out_channels();
    let expect = Shape4::new(xs.n, c_out, xs.h, xs.w);
    ensure_shape!(grad_y.shape() == expect, "output gradient {} != {expect}", grad_y.shape());
    let source = ConicPatches {
        frames,
        c_in: xs.c,
        plane: xs.plane(),
    };
    let gb = layer.bias.grad_mut();
    let gx = layer.weight.tensor.with_grad(|w, gw| {
        im2col::backward(&source, grad_y.data(), x.data(), xs.n, w.data(), c_out, gw, gb, true)
    });
    Tensor4::from_vec(xs, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d_backward, conv2d_forward, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c_in: usize, c_out: usize, seed: u64) -> ConicConvLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = ConicConvLayer::new("conic", c_in, c_out, &mut rng);
        l.bias.tensor = Tensor4::random_uniform(l.bias.tensor.shape(), 0.5, &mut rng);
        l
    }

    #[test]
    fn frame_axes_point_at_vanishing_point() {
        let f = build_conic_frame::<f32>(9, 9, ImagePoint::new(4.0, 4.0));
        assert_eq!(f.axis(1, 4), [1.0, 0.0]);
        assert_eq!(f.axis(4, 1), [0.0, 1.0]);
        assert_eq!(f.axis(4, 4), [1.0, 0.0]);
        for y in 0..9 {
            for x in 0..9 {
                let (t, r) = (f.axis(x, y), f.normal(x, y));
                assert!((t[0].hypot(t[1]) - 1.0).abs() < 1e-12);
                assert!((t[0] * r[0] + t[1] * r[1]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn far_vanishing_point_gives_horizontal_axis() {
        let f = build_conic_frame::<f32>(8, 8, ImagePoint::new(1e6, 3.0));
        for x in 0..8 {
            let t = f.axis(x, 3);
            assert!((t[0] - 1.0).abs() < 1e-5 && t[1].abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_interior_pixel() {
        let mut l = layer(1, 1, 0);
        l.weight.tensor = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        l.bias.tensor.data_mut()[0] = 0.25;
        let x = Tensor4::full(Shape4::new(1, 1, 9, 9), 2.0);
        let frame = build_conic_frame(9, 9, ImagePoint::new(-3.3, 7.1));
        for y in [conic_conv_reference(&x, &[frame.clone()], &l).unwrap(), conic_conv_fast(&x, &[frame], &l).unwrap()] {
            assert!((y.at(0, 0, 4, 4) - 18.25).abs() < 1e-12);
        }
    }

    #[test]
    fn far_point_reduces_to_plain_conv() {
        let l = layer(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(2, 3, 10, 12), 1.0, &mut rng);
        let frame = build_conic_frame(10, 12, ImagePoint::new(1e6, 5.0));
        let y = conic_conv_fast(&x, &[frame], &l).unwrap();
        let plain = conv2d_forward(&x, &l.weight.tensor, l.bias.value(), ConvSpec::new(3, 1, 1)).unwrap();
        assert!(y.max_abs_diff(&plain) < 1e-3);
    }

    #[test]
    fn far_point_backward_matches_plain_conv() {
        let mut l = layer(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 7, 7), 1.0, &mut rng);
        let gy = Tensor4::<f64>::random_uniform(Shape4::new(1, 3, 7, 7), 1.0, &mut rng);
        let frame = build_conic_frame(7, 7, ImagePoint::new(1e6, 3.0));
        let gx = conic_conv_backward(&gy, &x, &[frame], &mut l).unwrap();
        let (mut gw, mut gb) = (vec![0.0; 54], vec![0.0; 3]);
        let gx_plain = conv2d_backward(&gy, &x, &l.weight.tensor, ConvSpec::new(3, 1, 1), &mut gw, &mut gb).unwrap();
        assert!(gx.max_abs_diff(&gx_plain) < 1e-3);
        let dw = l.weight.grad().iter().zip(&gw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dw < 1e-3);
        assert_eq!(l.bias.grad(), gb.as_slice());
    }

    #[test]
    fn fast_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..12 {
            let (c_in, c_out, h, w) = (1 + case % 3, 1 + case % 4, 5 + case, 17 - case);
            let l = layer(c_in, c_out, case as u64);
            let x = Tensor4::<f64>::random_uniform(Shape4::new(2, c_in, h, w), 1.0, &mut rng);
            let frames: Vec<_> = (0..2)
                .map(|_| {
                    let v = ImagePoint::new(rng.gen_range(-20.0..40.0), rng.gen_range(-20.0..40.0));
                    build_conic_frame(h, w, v)
                })
                .collect();
            let a = conic_conv_fast(&x, &frames, &l).unwrap();
            let b = conic_conv_reference(&x, &frames, &l).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "case {case}");
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut l = layer(2, 2, 6);
        let x = Tensor4::full(Shape4::new(1, 2, 6, 6), 1.0);
        let gy = Tensor4::zeros(Shape4::new(1, 2, 6, 6));
        let frame = build_conic_frame(6, 6, ImagePoint::new(2.5, 1.0));
        let gx = conic_conv_backward(&gy, &x, &[frame], &mut l).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(l.weight.grad().iter().all(|&v| v == 0.0));
        assert!(l.bias.grad().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let l = layer(2, 2, 7);
        let frame = build_conic_frame(6, 6, ImagePoint::new(0.0, 0.0));
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 0, 6, 6));
        assert!(conic_conv_fast(&x, &[frame.clone()], &l).is_err());
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 6, 5));
        assert!(conic_conv_fast(&x, &[frame.clone()], &l).is_err());
        let x = Tensor4::<f64>::zeros(Shape4::new(3, 2, 6, 6));
        assert!(conic_conv_fast(&x, &[frame.clone(), frame], &l).is_err());
        let zero_in = ConicConvLayer::<f64>::new("z", 0, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 0, 6, 6));
        let frame = build_conic_frame(6, 6, ImagePoint::new(0.0, 0.0));
        assert!(conic_conv_reference(&x, &[frame], &zero_in).is_err());
    }

    #[test]
    fn parameter_count_matches_plain_conv() {
        let l = layer(32, 64, 8);
        assert_eq!(l.param_count(), 64 * 32 * 9 + 64);
    }
}
