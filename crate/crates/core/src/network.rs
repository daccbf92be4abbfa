//! The candidate classifier: a small strided backbone shared by all
//! candidates of an image, and a head that looks at the feature map through
//! the conic frames of one candidate vanishing point.
//!
//! Head, per candidate `d`:
//!
//! ```text
//! [features ++ d] -> 1x1 conv -> BN -> ReLU
//!   -> 4 x (3x3 conic conv -> BN -> ReLU -> maxpool 3/2)
//!   -> flatten -> FC -> BN -> ReLU -> FC -> sigmoid   (one output per threshold)
//! ```
//!
//! [`HeadMode::Plain`] swaps every conic convolution for an ordinary 3x3
//! convolution with the same parameter count; `d` is concatenated in both
//! modes so the two models have identical shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic_conv::{build_conic_frame, ConicConvLayer, ConicFrame};
use crate::error::{ensure_shape, Error, Result};
use crate::geometry::{direction_to_vp_or_far, CameraIntrinsics, ImagePoint, UnitDirection};
use crate::nn::{self, Adam, BatchNorm, BatchNormCache, Conv2d, ConvSpec, Linear};
use crate::scalar::Scalar;
use crate::sphere_sampling::CandidateLabel;
use crate::tensor::{Param, Shape4, Tensor4};

/// Distance, in pixels, at which ideal candidates are placed along their
/// image-plane direction.
pub const FAR_POINT_DISTANCE: f64 = 1e6;

const POOL: ConvSpec = ConvSpec::new(3, 2, 1);
const BACKBONE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Conic,
    Plain,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conic" => Ok(HeadMode::Conic),
            "plain" => Ok(HeadMode::Plain),
            _ => Err(Error::InvalidArgument(format!("head mode must be conic or plain, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub feature_channels: usize,
    pub reduced_channels: usize,
    /// Output channels of each head stage; each doubles the previous.
    pub stage_channels: Vec<usize>,
    pub fc_hidden: usize,
    /// One sigmoid output per threshold.
    pub outputs: usize,
    pub head_mode: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            image_size: 128,
            stem_channels: 32,
            feature_channels: 64,
            reduced_channels: 32,
            stage_channels: vec![32, 64, 128, 256],
            fc_hidden: 64,
            outputs: 5,
            head_mode: HeadMode::Conic,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("image_size", self.image_size),
            ("stem_channels", self.stem_channels),
            ("feature_channels", self.feature_channels),
            ("reduced_channels", self.reduced_channels),
            ("fc_hidden", self.fc_hidden),
            ("outputs", self.outputs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!("image_size {} is below 8", self.image_size)));
        }
        match self.stage_channels.first() {
            None => return Err(Error::InvalidArgument("stage_channels is empty".into())),
            Some(0) => return Err(Error::InvalidArgument("stage_channels must be positive".into())),
            Some(_) => {}
        }
        if self.stage_channels.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::InvalidArgument(format!(
                "stage_channels must double at every stage, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }

    /// Side of the backbone feature map.
    pub fn feature_size(&self) -> usize {
        let s = ConvSpec::new(7, 2, 3).output_size(self.image_size).expect("validated size");
        ConvSpec::new(3, 2, 1).output_size(s).expect("validated size")
    }

    /// Side of the map entering each head stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.feature_size()];
        for _ in 1..self.stage_channels.len() {
            let last = *sizes.last().unwrap();
            sizes.push(POOL.output_size(last).expect("pool fits"));
        }
        sizes
    }

    fn flat_features(&self) -> usize {
        let last = *self.stage_sizes().last().unwrap();
        let pooled = POOL.output_size(last).expect("pool fits");
        self.stage_channels.last().unwrap() * pooled * pooled
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

struct BlockCache<T> {
    input: Tensor4<T>,
    bn: BatchNormCache<T>,
    pre_relu: Tensor4<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(name: &str, c_in: usize, c_out: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, spec, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out),
        }
    }

    fn train(&mut self, x: Tensor4<T>) -> Result<(Tensor4<T>, BlockCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (pre, bn) = self.bn.forward_train(&z)?;
        let y = nn::relu_forward(&pre);
        Ok((
            y,
            BlockCache {
                input: x,
                bn,
                pre_relu: pre,
            },
        ))
    }

    fn eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let z = self.conv.forward(x)?;
        Ok(nn::relu_forward(&self.bn.forward_eval(&z)?.0))
    }

    fn backward(&mut self, grad_y: &Tensor4<T>, cache: &BlockCache<T>) -> Result<Tensor4<T>> {
        let g = nn::relu_backward(grad_y, &cache.pre_relu)?;
        let g = self.bn.backward(&g, &cache.bn)?;
        self.conv.backward(&g, &cache.input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        ConvBlock {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
        }
    }
}

#[derive(Debug, Clone)]
enum StageConv<T> {
    Conic(ConicConvLayer<T>),
    Plain(Conv2d<T>),
}

#[derive(Debug, Clone)]
struct Stage<T> {
    conv: StageConv<T>,
    bn: BatchNorm<T>,
}

struct StageCache<T> {
    input: Tensor4<T>,
    bn: BatchNormCache<T>,
    pre_relu: Tensor4<T>,
    argmax: Vec<usize>,
}

impl<T: Scalar> Stage<T> {
    fn conv(&self, x: &Tensor4<T>, frames: &[ConicFrame<T>]) -> Result<Tensor4<T>> {
        match &self.conv {
            StageConv::Conic(layer) => layer.forward(x, frames),
            StageConv::Plain(conv) => conv.forward(x),
        }
    }

    fn train(&mut self, x: Tensor4<T>, frames: &[ConicFrame<T>]) -> Result<(Tensor4<T>, StageCache<T>)> {
        let z = self.conv(&x, frames)?;
        let (pre, bn) = self.bn.forward_train(&z)?;
        let pooled = nn::maxpool2d_forward(&nn::relu_forward(&pre), POOL)?;
        let cache = StageCache {
            input: x,
            bn,
            pre_relu: pre,
            argmax: pooled.argmax,
        };
        Ok((pooled.y, cache))
    }

    fn eval(&self, x: &Tensor4<T>, frames: &[ConicFrame<T>]) -> Result<Tensor4<T>> {
        let pre = self.bn.forward_eval(&self.conv(x, frames)?)?.0;
        Ok(nn::maxpool2d_forward(&nn::relu_forward(&pre), POOL)?.y)
    }

    fn backward(&mut self, grad_y: &Tensor4<T>, cache: &StageCache<T>, frames: &[ConicFrame<T>]) -> Result<Tensor4<T>> {
        let g = nn::maxpool2d_backward(grad_y, &cache.argmax, cache.pre_relu.shape())?;
        let g = nn::relu_backward(&g, &cache.pre_relu)?;
        let g = self.bn.backward(&g, &cache.bn)?;
        match &mut self.conv {
            StageConv::Conic(layer) => layer.backward(&g, &cache.input, frames),
            StageConv::Plain(conv) => conv.backward(&g, &cache.input),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = match &self.conv {
            StageConv::Conic(l) => l.params(),
            StageConv::Plain(c) => c.params(),
        };
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = match &mut self.conv {
            StageConv::Conic(l) => l.params_mut(),
            StageConv::Plain(c) => c.params_mut(),
        };
        p.extend(self.bn.params_mut());
        p
    }

    fn cast<U: Scalar>(&self) -> Stage<U> {
        Stage {
            conv: match &self.conv {
                StageConv::Conic(l) => StageConv::Conic(l.cast()),
                StageConv::Plain(c) => StageConv::Plain(c.cast()),
            },
            bn: self.bn.cast(),
        }
    }
}

struct HeadCache<T> {
    frames: Vec<Vec<ConicFrame<T>>>,
    reduce: BlockCache<T>,
    stages: Vec<StageCache<T>>,
    pooled_shape: Shape4,
    flat: Tensor4<T>,
    fc1_bn: BatchNormCache<T>,
    fc1_pre: Tensor4<T>,
    fc2_in: Tensor4<T>,
    probs: Tensor4<T>,
    feature_channels: usize,
}

/// One training image with its labeled candidates. `image` is `1 x C x S x S`
/// with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct TrainingExample<T = f32> {
    pub image: Tensor4<T>,
    pub intrinsics: CameraIntrinsics,
    pub candidates: Vec<CandidateLabel>,
}

#[derive(Debug, Clone)]
pub struct VpsModel<T = f32> {
    config: ModelConfig,
    backbone: Vec<ConvBlock<T>>,
    reduce: ConvBlock<T>,
    stages: Vec<Stage<T>>,
    fc1: Linear<T>,
    fc1_bn: BatchNorm<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> VpsModel<T> {
    /// Kaiming-initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, stem, feat) = (config.input_channels, config.stem_channels, config.feature_channels);
        let backbone = vec![
            ConvBlock::new("backbone.0", cin, stem, ConvSpec::new(7, 2, 3), &mut rng),
            ConvBlock::new("backbone.1", stem, feat, ConvSpec::new(3, 2, 1), &mut rng),
            ConvBlock::new("backbone.2", feat, feat, ConvSpec::new(3, 1, 1), &mut rng),
            ConvBlock::new("backbone.3", feat, feat, ConvSpec::new(3, 1, 1), &mut rng),
        ];
        let reduce = ConvBlock::new(
            "head.reduce",
            feat + 3,
            config.reduced_channels,
            ConvSpec::new(1, 1, 0),
            &mut rng,
        );
        let mut stages = Vec::new();
        let mut c_in = config.reduced_channels;
        for (i, &c_out) in config.stage_channels.iter().enumerate() {
            let name = format!("head.stage{i}.conv");
            let conv = match config.head_mode {
                HeadMode::Conic => StageConv::Conic(ConicConvLayer::new(&name, c_in, c_out, &mut rng)),
                HeadMode::Plain => StageConv::Plain(Conv2d::new(&name, c_in, c_out, ConvSpec::new(3, 1, 1), &mut rng)),
            };
            stages.push(Stage {
                conv,
                bn: BatchNorm::new(&format!("head.stage{i}.bn"), c_out),
            });
            c_in = c_out;
        }
        let fc1 = Linear::new("head.fc1", config.flat_features(), config.fc_hidden, &mut rng);
        let fc1_bn = BatchNorm::new("head.fc1.bn", config.fc_hidden);
        let fc2 = Linear::new("head.fc2", config.fc_hidden, config.outputs, &mut rng);
        Ok(VpsModel {
            config,
            backbone,
            reduce,
            stages,
            fc1,
            fc1_bn,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn outputs(&self) -> usize {
        self.config.outputs
    }

    /// Every tensor in a fixed order: trainable weights and batch-norm
    /// running statistics.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.backbone.iter().flat_map(|b| b.params()).collect();
        p.extend(self.reduce.params());
        for s in &self.stages {
            p.extend(s.params());
        }
        p.extend(self.fc1.params());
        p.extend(self.fc1_bn.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.backbone.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.reduce.params_mut());
        for s in &mut self.stages {
            p.extend(s.params_mut());
        }
        p.extend(self.fc1.params_mut());
        p.extend(self.fc1_bn.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> VpsModel<U> {
        VpsModel {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(|b| b.cast()).collect(),
            reduce: self.reduce.cast(),
            stages: self.stages.iter().map(|s| s.cast()).collect(),
            fc1: self.fc1.cast(),
            fc1_bn: self.fc1_bn.cast(),
            fc2: self.fc2.cast(),
        }
    }

    fn check_images(&self, images: &Tensor4<T>) -> Result<()> {
        let s = images.shape();
        ensure_shape!(s.h == s.w, "backbone input must be square, got {s}");
        ensure_shape!(
            s.c == self.config.input_channels && s.h == self.config.image_size,
            "model takes {}x{}x{} images, got {s}",
            self.config.input_channels,
            self.config.image_size,
            self.config.image_size
        );
        Ok(())
    }

    /// Eval-mode feature maps, `N x C_feat x S/4 x S/4`.
    pub fn backbone_forward(&self, images: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_images(images)?;
        let mut x = self.backbone[0].eval(images)?;
        for b in &self.backbone[1..] {
            x = b.eval(&x)?;
        }
        Ok(x)
    }

    fn backbone_train(&mut self, images: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<BlockCache<T>>)> {
        self.check_images(images)?;
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(self.backbone.len());
        for b in &mut self.backbone {
            let (y, c) = b.train(x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    fn backbone_backward(&mut self, grad: Tensor4<T>, caches: &[BlockCache<T>]) -> Result<()> {
        let mut g = grad;
        for (b, c) in self.backbone.iter_mut().zip(caches).rev() {
            g = b.backward(&g, c)?;
        }
        Ok(())
    }

    /// Conic frames of every stage for one candidate image point.
    fn frames_for(&self, v: ImagePoint) -> Vec<ConicFrame<T>> {
        let mut stride = BACKBONE_STRIDE as f64;
        self.config
            .stage_sizes()
            .into_iter()
            .map(|s| {
                let f = build_conic_frame(s, s, ImagePoint::new(v.u / stride, v.v / stride));
                stride *= 2.0;
                f
            })
            .collect()
    }

    /// Replicates each image's features once per candidate and appends the
    /// candidate direction as three constant planes.
    fn head_input(&self, features: &Tensor4<T>, owners: &[usize], dirs: &[UnitDirection]) -> Tensor4<T> {
        let fs = features.shape();
        let shape = Shape4::new(dirs.len(), fs.c + 3, fs.h, fs.w);
        let mut x = Tensor4::zeros(shape);
        let plane = fs.plane();
        for (m, (&owner, d)) in owners.iter().zip(dirs).enumerate() {
            let item = x.item_mut(m);
            item[..fs.c * plane].copy_from_slice(features.item(owner));
            for (k, v) in d.to_array().into_iter().enumerate() {
                item[(fs.c + k) * plane..(fs.c + k + 1) * plane].fill(T::of(v));
            }
        }
        x
    }

    /// Stage-major frames: `frames[stage][candidate]`. Empty in plain mode.
    fn stage_frames(&self, points: &[ImagePoint]) -> Vec<Vec<ConicFrame<T>>> {
        match self.config.head_mode {
            HeadMode::Conic => {
                let mut frames = vec![Vec::with_capacity(points.len()); self.stages.len()];
                for &v in points {
                    for (s, f) in self.frames_for(v).into_iter().enumerate() {
                        frames[s].push(f);
                    }
                }
                frames
            }
            HeadMode::Plain => vec![Vec::new(); self.stages.len()],
        }
    }

    fn head_eval(&self, features: &Tensor4<T>, owners: &[usize], dirs: &[UnitDirection], points: &[ImagePoint]) -> Result<Tensor4<T>> {
        let frames = self.stage_frames(points);
        let mut x = self.reduce.eval(&self.head_input(features, owners, dirs))?;
        for (stage, f) in self.stages.iter().zip(&frames) {
            x = stage.eval(&x, f)?;
        }
        let s = x.shape();
        let flat = x.reshape(Shape4::new(s.n, s.item_len(), 1, 1))?;
        let z = self.fc1.forward(&flat)?;
        let hidden = nn::relu_forward(&self.fc1_bn.forward_eval(&z)?.0);
        Ok(nn::sigmoid_forward(&self.fc2.forward(&hidden)?))
    }

    fn head_train(
        &mut self,
        features: &Tensor4<T>,
        owners: &[usize],
        dirs: &[UnitDirection],
        points: &[ImagePoint],
    ) -> Result<(Tensor4<T>, HeadCache<T>)> {
        let frames = self.stage_frames(points);
        let x = self.head_input(features, owners, dirs);
        let (mut x, reduce) = self.reduce.train(x)?;
        let mut stage_caches = Vec::new();
        for (stage, f) in self.stages.iter_mut().zip(&frames) {
            let (y, c) = stage.train(x, f)?;
            stage_caches.push(c);
            x = y;
        }
        let pooled_shape = x.shape();
        let flat = x.reshape(Shape4::new(pooled_shape.n, pooled_shape.item_len(), 1, 1))?;
        let z = self.fc1.forward(&flat)?;
        let (pre, fc1_bn) = self.fc1_bn.forward_train(&z)?;
        let hidden = nn::relu_forward(&pre);
        let logits = self.fc2.forward(&hidden)?;
        let probs = nn::sigmoid_forward(&logits);
        let cache = HeadCache {
            frames,
            reduce,
            stages: stage_caches,
            pooled_shape,
            flat,
            fc1_bn,
            fc1_pre: pre,
            fc2_in: hidden,
            probs: probs.clone(),
            feature_channels: features.shape().c,
        };
        Ok((probs, cache))
    }

    /// Returns the gradient with respect to the replicated feature input,
    /// `M x C_feat x h x w`.
    fn head_backward(&mut self, grad_probs: &Tensor4<T>, cache: &HeadCache<T>) -> Result<Tensor4<T>> {
        let g = nn::sigmoid_backward(grad_probs, &cache.probs)?;
        let g = self.fc2.backward(&g, &cache.fc2_in)?;
        let g = nn::relu_backward(&g, &cache.fc1_pre)?;
        let g = self.fc1_bn.backward(&g, &cache.fc1_bn)?;
        let g = self.fc1.backward(&g, &cache.flat)?;
        let mut g = g.reshape(cache.pooled_shape)?;
        for ((stage, c), f) in self.stages.iter_mut().zip(&cache.stages).zip(&cache.frames).rev() {
            g = stage.backward(&g, c, f)?;
        }
        let g = self.reduce.backward(&g, &cache.reduce)?;
        let gs = g.shape();
        let c = cache.feature_channels;
        let mut out = Tensor4::zeros(Shape4::new(gs.n, c, gs.h, gs.w));
        for m in 0..gs.n {
            out.item_mut(m).copy_from_slice(&g.item(m)[..c * gs.plane()]);
        }
        Ok(out)
    }

    /// Eval-mode probabilities, one row of `outputs` values per candidate.
    /// `features` is the `1 x C x h x w` map of a single image.
    pub fn head_forward(
        &self,
        features: &Tensor4<T>,
        candidates: &[UnitDirection],
        intrinsics: &CameraIntrinsics,
    ) -> Result<Vec<Vec<f64>>> {
        let fs = features.shape();
        ensure_shape!(fs.n == 1, "head_forward scores one image at a time, got {fs}");
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let points: Vec<ImagePoint> = candidates
            .iter()
            .map(|d| direction_to_vp_or_far(d, intrinsics, FAR_POINT_DISTANCE))
            .collect();
        let owners = vec![0; candidates.len()];
        let probs = self.head_eval(features, &owners, candidates, &points)?;
        let r = self.config.outputs;
        Ok(probs.data().chunks(r).map(|row| row.iter().map(|v| v.f64()).collect()).collect())
    }

    /// Training-mode forward and backward over a batch: mean binary
    /// cross-entropy over all candidates and thresholds. Gradients are
    /// added to the parameter gradient buffers and batch-norm running
    /// statistics are updated.
    pub fn loss_and_backward(&mut self, batch: &[TrainingExample<T>]) -> Result<f64> {
        self.forward_train(batch, true)
    }

    /// Training-mode loss without a backward pass.
    pub fn training_loss(&mut self, batch: &[TrainingExample<T>]) -> Result<f64> {
        self.forward_train(batch, false)
    }

    fn forward_train(&mut self, batch: &[TrainingExample<T>], backward: bool) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let r = self.config.outputs;
        let s = self.config.image_size;
        let c = self.config.input_channels;
        let mut images = Tensor4::zeros(Shape4::new(batch.len(), c, s, s));
        let (mut owners, mut dirs, mut points, mut targets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, ex) in batch.iter().enumerate() {
            ensure_shape!(
                ex.image.shape() == Shape4::new(1, c, s, s),
                "training image {} is {}, expected 1x{c}x{s}x{s}",
                i,
                ex.image.shape()
            );
            images.item_mut(i).copy_from_slice(ex.image.data());
            for cand in &ex.candidates {
                ensure_shape!(
                    cand.labels.len() == r,
                    "candidate has {} labels, model has {r} outputs",
                    cand.labels.len()
                );
                owners.push(i);
                dirs.push(cand.direction);
                points.push(direction_to_vp_or_far(&cand.direction, &ex.intrinsics, FAR_POINT_DISTANCE));
                targets.extend(cand.labels.iter().map(|&l| if l { T::one() } else { T::zero() }));
            }
        }
        if dirs.is_empty() {
            return Err(Error::InvalidArgument("training batch has no candidates".into()));
        }
        let (features, backbone_caches) = self.backbone_train(&images)?;
        let (probs, cache) = self.head_train(&features, &owners, &dirs, &points)?;
        let loss = nn::bce_loss(probs.data(), &targets)?;
        if backward {
            let gp = Tensor4::from_vec(probs.shape(), nn::bce_backward(probs.data(), &targets)?)?;
            let g_rep = self.head_backward(&gp, &cache)?;
            let mut g_feat = Tensor4::zeros(features.shape());
            for (m, &owner) in owners.iter().enumerate() {
                g_feat
                    .item_mut(owner)
                    .iter_mut()
                    .zip(g_rep.item(m))
                    .for_each(|(a, &b)| *a += b);
            }
            self.backbone_backward(g_feat, &backbone_caches)?;
        }
        Ok(loss)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn training_step(&mut self, batch: &[TrainingExample<T>], optimizer: &mut Adam) -> Result<f64> {
        self.zero_grad();
        let loss = self.loss_and_backward(batch)?;
        optimizer.step(self.params_mut());
        Ok(loss)
    }
}
