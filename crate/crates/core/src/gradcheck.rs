//! Finite-difference checks of every hand-written backward pass.
//!
//! Each fixture computes `L = sum(r * f(inputs))` for a fixed random `r`.
//! The analytic gradient is evaluated in the scalar type under test; the
//! numeric one always re-runs the forward pass in `f64` with central
//! differences, so a 32-bit check measures the 32-bit backward against a
//! 64-bit oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conic_conv::{build_conic_frame, conic_conv_backward, conic_conv_fast, ConicConvLayer, ConicFrame};
use crate::geometry::{vp_to_direction, CameraIntrinsics, ImagePoint};
use crate::network::{HeadMode, ModelConfig, TrainingExample, VpsModel};
use crate::sphere_sampling::CandidateLabel;
use crate::nn::{self, ConvSpec, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::{Param, Shape4, Tensor4};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Coordinates checked per fixture.
const MAX_CHECKS: usize = 256;

/// `(L(x + h e_i) - L(x - h e_i)) / 2h` for each `i` in `indices`.
pub fn central_differences(x: &[f64], indices: &[usize], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = loss(&probe);
            probe[i] = x[i] - h;
            let down = loss(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `max|a - n| / max(max|a|, max|n|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// A differentiable scalar function of a flat input vector.
pub trait Fixture {
    fn inputs(&self) -> &[f64];
    /// Loss and its gradient with respect to every input, computed in `T`.
    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>);
    fn loss(&self, inputs: &[f64]) -> f64 {
        self.loss_and_grad::<f64>(inputs).0
    }
}

/// Compares the `T` analytic gradient against `f64` central differences on
/// up to 256 randomly chosen coordinates.
pub fn check<T: Scalar, F: Fixture>(fixture: &F, seed: u64) -> f64 {
    let x = fixture.inputs();
    let (_, analytic) = fixture.loss_and_grad::<T>(x);
    let mut indices: Vec<usize> = (0..x.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(MAX_CHECKS);
    let numeric = central_differences(x, &indices, FD_STEP, |p| fixture.loss(p));
    let picked: Vec<f64> = indices.iter().map(|&i| analytic[i]).collect();
    relative_error(&picked, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn tensor<T: Scalar>(shape: Shape4, data: &[f64]) -> Tensor4<T> {
    Tensor4::from_vec(shape, data.iter().map(|&v| T::of(v)).collect()).expect("fixture shape")
}

fn dot<T: Scalar>(r: &[f64], y: &Tensor4<T>) -> f64 {
    r.iter().zip(y.data()).map(|(a, b)| a * b.f64()).sum()
}

fn upstream<T: Scalar>(shape: Shape4, r: &[f64]) -> Tensor4<T> {
    tensor(shape, r)
}

fn widen<T: Scalar>(v: &[T]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|x| x.f64())
}

/// Splits a flat input vector into consecutive pieces of the given lengths.
fn split<'a>(x: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        out.push(&x[at..at + l]);
        at += l;
    }
    out
}

pub struct Conv2dFixture {
    x: Shape4,
    w: Shape4,
    spec: ConvSpec,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl Conv2dFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(2, 3, 9, 8);
        let w = Shape4::new(4, 3, 3, 3);
        let spec = ConvSpec::new(3, 2, 1);
        let out = Shape4::new(2, 4, spec.output_size(9).unwrap(), spec.output_size(8).unwrap());
        let inputs = uniform(&mut rng, x.len() + w.len() + w.n, 1.0);
        let r = uniform(&mut rng, out.len(), 1.0);
        Conv2dFixture { x, w, spec, inputs, r }
    }
}

impl Fixture for Conv2dFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let p = split(inputs, &[self.x.len(), self.w.len(), self.w.n]);
        let (x, w) = (tensor::<T>(self.x, p[0]), tensor::<T>(self.w, p[1]));
        let b: Vec<T> = p[2].iter().map(|&v| T::of(v)).collect();
        let y = nn::conv2d_forward(&x, &w, &b, self.spec).unwrap();
        let (mut gw, mut gb) = (vec![T::zero(); self.w.len()], vec![T::zero(); self.w.n]);
        let gx = nn::conv2d_backward(&upstream(y.shape(), &self.r), &x, &w, self.spec, &mut gw, &mut gb).unwrap();
        let grad = widen(gx.data()).chain(widen(&gw)).chain(widen(&gb)).collect();
        (dot(&self.r, &y), grad)
    }
}

pub struct MaxPoolFixture {
    x: Shape4,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl MaxPoolFixture {
    /// Input values are a shuffled grid with spacing 0.01, so no window
    /// changes its argmax under a step of `FD_STEP`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(2, 2, 9, 10);
        let mut inputs: Vec<f64> = (0..x.len()).map(|i| i as f64 * 0.01 - 1.0).collect();
        inputs.shuffle(&mut rng);
        let r = uniform(&mut rng, 2 * 2 * 5 * 5, 1.0);
        MaxPoolFixture { x, inputs, r }
    }
}

impl Fixture for MaxPoolFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let x = tensor::<T>(self.x, inputs);
        let out = nn::maxpool2d_forward(&x, ConvSpec::new(3, 2, 1)).unwrap();
        let gx = nn::maxpool2d_backward(&upstream::<T>(out.y.shape(), &self.r), &out.argmax, self.x).unwrap();
        (dot(&self.r, &out.y), widen(gx.data()).collect())
    }
}

pub struct BatchNormFixture {
    x: Shape4,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl BatchNormFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(4, 3, 5, 6);
        let mut inputs = uniform(&mut rng, x.len(), 2.0);
        inputs.extend((0..3).map(|_| rng.gen_range(0.5..1.5)));
        inputs.extend(uniform(&mut rng, 3, 0.5));
        let r = uniform(&mut rng, x.len(), 1.0);
        BatchNormFixture { x, inputs, r }
    }
}

impl Fixture for BatchNormFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let c = self.x.c;
        let p = split(inputs, &[self.x.len(), c, c]);
        let x = tensor::<T>(self.x, p[0]);
        let gamma: Vec<T> = p[1].iter().map(|&v| T::of(v)).collect();
        let beta: Vec<T> = p[2].iter().map(|&v| T::of(v)).collect();
        let (zeros, ones) = (vec![T::zero(); c], vec![T::one(); c]);
        let running = RunningStats {
            mean: &zeros,
            var: &ones,
        };
        let (y, cache, _) = nn::batchnorm_forward(&x, &gamma, &beta, running, true).unwrap();
        let (mut gg, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
        let gx = nn::batchnorm_backward(&upstream(y.shape(), &self.r), &cache, &gamma, &mut gg, &mut gb).unwrap();
        let grad = widen(gx.data()).chain(widen(&gg)).chain(widen(&gb)).collect();
        (dot(&self.r, &y), grad)
    }
}

pub struct LinearFixture {
    x: Shape4,
    w: Shape4,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl LinearFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(3, 4, 2, 2);
        let w = Shape4::new(5, 16, 1, 1);
        let inputs = uniform(&mut rng, x.len() + w.len() + 5, 1.0);
        let r = uniform(&mut rng, 15, 1.0);
        LinearFixture { x, w, inputs, r }
    }
}

impl Fixture for LinearFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let p = split(inputs, &[self.x.len(), self.w.len(), self.w.n]);
        let (x, w) = (tensor::<T>(self.x, p[0]), tensor::<T>(self.w, p[1]));
        let b: Vec<T> = p[2].iter().map(|&v| T::of(v)).collect();
        let y = nn::linear_forward(&x, &w, &b).unwrap();
        let (mut gw, mut gb) = (vec![T::zero(); self.w.len()], vec![T::zero(); self.w.n]);
        let gx = nn::linear_backward(&upstream(y.shape(), &self.r), &x, &w, &mut gw, &mut gb).unwrap();
        let grad = widen(gx.data()).chain(widen(&gw)).chain(widen(&gb)).collect();
        (dot(&self.r, &y), grad)
    }
}

/// ReLU on inputs kept at least 0.05 away from the kink.
pub struct ReluFixture {
    x: Shape4,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl ReluFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(2, 3, 4, 4);
        let inputs = (0..x.len())
            .map(|_| {
                let m = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let r = uniform(&mut rng, x.len(), 1.0);
        ReluFixture { x, inputs, r }
    }
}

impl Fixture for ReluFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let x = tensor::<T>(self.x, inputs);
        let y = nn::relu_forward(&x);
        let gx = nn::relu_backward(&upstream(self.x, &self.r), &x).unwrap();
        (dot(&self.r, &y), widen(gx.data()).collect())
    }
}

/// Binary cross-entropy through the sigmoid, differentiated with respect
/// to the logits: the composition the classifier trains.
pub struct BceFixture {
    targets: Vec<f64>,
    inputs: Vec<f64>,
}

impl BceFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = uniform(&mut rng, 40, 3.0);
        let targets = (0..40).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        BceFixture { targets, inputs }
    }
}

impl Fixture for BceFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let shape = Shape4::new(inputs.len(), 1, 1, 1);
        let z = tensor::<T>(shape, inputs);
        let p = nn::sigmoid_forward(&z);
        let targets: Vec<T> = self.targets.iter().map(|&v| T::of(v)).collect();
        let loss = nn::bce_loss(p.data(), &targets).unwrap();
        let gp = Tensor4::from_vec(shape, nn::bce_backward(p.data(), &targets).unwrap()).unwrap();
        let gz = nn::sigmoid_backward(&gp, &p).unwrap();
        (loss, widen(gz.data()).collect())
    }
}

pub struct ConicFixture {
    x: Shape4,
    c_out: usize,
    points: Vec<ImagePoint>,
    inputs: Vec<f64>,
    r: Vec<f64>,
}

impl ConicFixture {
    /// Two items with different vanishing points, one inside the map and
    /// one outside.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Shape4::new(2, 2, 8, 8);
        let c_out = 3;
        let points = vec![
            ImagePoint::new(rng.gen_range(0.0..7.0), rng.gen_range(0.0..7.0)),
            ImagePoint::new(rng.gen_range(-30.0..-10.0), rng.gen_range(10.0..40.0)),
        ];
        let inputs = uniform(&mut rng, x.len() + c_out * x.c * 9 + c_out, 1.0);
        let r = uniform(&mut rng, x.n * c_out * x.plane(), 1.0);
        ConicFixture {
            x,
            c_out,
            points,
            inputs,
            r,
        }
    }
}

impl Fixture for ConicFixture {
    fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn loss_and_grad<T: Scalar>(&self, inputs: &[f64]) -> (f64, Vec<f64>) {
        let wshape = Shape4::new(self.c_out, self.x.c, 3, 3);
        let p = split(inputs, &[self.x.len(), wshape.len(), self.c_out]);
        let x = tensor::<T>(self.x, p[0]);
        let mut layer = ConicConvLayer::from_parts(
            Param::trainable("w", tensor::<T>(wshape, p[1])),
            Param::trainable("b", tensor::<T>(Shape4::new(1, 1, 1, self.c_out), p[2])),
        )
        .unwrap();
        let frames: Vec<ConicFrame<T>> = self
            .points
            .iter()
            .map(|&v| build_conic_frame(self.x.h, self.x.w, v))
            .collect();
        let y = conic_conv_fast(&x, &frames, &layer).unwrap();
        let gx = conic_conv_backward(&upstream(y.shape(), &self.r), &x, &frames, &mut layer).unwrap();
        let grad = widen(gx.data())
            .chain(widen(layer.weight.grad()))
            .chain(widen(layer.bias.grad()))
            .collect();
        (dot(&self.r, &y), grad)
    }
}

/// End-to-end check of a tiny model (`C_feat = 4`, 16x16 input): `count`
/// randomly chosen trainable scalars, analytic gradient in `T` against
/// `f64` central differences with step `h`.
pub fn check_model<T: Scalar>(mode: HeadMode, count: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        input_channels: 1,
        image_size: 16,
        stem_channels: 4,
        feature_channels: 4,
        reduced_channels: 4,
        stage_channels: vec![4, 8, 16, 32],
        fc_hidden: 8,
        outputs: 3,
        head_mode: mode,
    };
    let k = CameraIntrinsics::for_image(16, 16, None).expect("valid size");
    let batch: Vec<TrainingExample<f64>> = (0..3)
        .map(|_| {
            let image = Tensor4::random_uniform(Shape4::new(1, 1, 16, 16), 1.0, &mut rng);
            let candidates = (0..3)
                .map(|_| {
                    let v = ImagePoint::new(rng.gen_range(-8.0..24.0), rng.gen_range(-8.0..24.0));
                    CandidateLabel {
                        direction: vp_to_direction(v, &k),
                        labels: (0..3).map(|_| rng.gen_bool(0.5)).collect(),
                    }
                })
                .collect();
            TrainingExample {
                image,
                intrinsics: k,
                candidates,
            }
        })
        .collect();
    let base = VpsModel::<f64>::new(config, seed).expect("valid config");

    let mut model = base.cast::<T>();
    let cast_batch: Vec<TrainingExample<T>> = batch
        .iter()
        .map(|e| TrainingExample {
            image: e.image.cast(),
            intrinsics: e.intrinsics,
            candidates: e.candidates.clone(),
        })
        .collect();
    model.zero_grad();
    model.loss_and_backward(&cast_batch).expect("training pass");

    let slots: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let picked: Vec<(usize, usize)> = slots.choose_multiple(&mut rng, count).copied().collect();
    let analytic: Vec<f64> = picked
        .iter()
        .map(|&(i, j)| model.params()[i].grad()[j].f64())
        .collect();
    let numeric: Vec<f64> = picked
        .iter()
        .map(|&(i, j)| {
            let eval = |delta: f64| {
                let mut m = base.clone();
                m.params_mut()[i].tensor.data_mut()[j] += delta;
                m.training_loss(&batch).expect("training pass")
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

/// Runs every kernel fixture with analytic gradients in `T`; returns
/// `(kernel name, relative error)` pairs.
pub fn check_all<T: Scalar>(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conic_conv", check::<T, _>(&ConicFixture::new(seed), seed)),
        ("conv2d", check::<T, _>(&Conv2dFixture::new(seed), seed)),
        ("maxpool2d", check::<T, _>(&MaxPoolFixture::new(seed), seed)),
        ("batchnorm", check::<T, _>(&BatchNormFixture::new(seed), seed)),
        ("linear", check::<T, _>(&LinearFixture::new(seed), seed)),
        ("relu", check::<T, _>(&ReluFixture::new(seed), seed)),
        ("sigmoid_bce", check::<T, _>(&BceFixture::new(seed), seed)),
    ]
}
