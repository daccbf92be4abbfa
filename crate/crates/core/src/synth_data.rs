//! Procedural line scenes with exact vanishing points.
//!
//! Each structural line of a vanishing point is a segment through a random
//! anchor pixel, aimed at the vanishing point's image (or, for ideal points,
//! along its image-plane direction). Clutter segments have random
//! orientation. Strokes are anti-aliased by pixel-to-segment distance, then
//! Gaussian noise is added and the result clamped to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{direction_to_vp, direction_to_vp_or_far, CameraIntrinsics, ImagePoint, UnitDirection};
use crate::network::FAR_POINT_DISTANCE;
use crate::sphere_sampling::{sample_cap_uniform, sample_hemisphere_uniform};
use crate::tensor::{Shape4, Tensor4};

pub const DATASET_VERSION: u32 = 1;

const SPLIT_SALT: u64 = 0x5eed_5917;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Focal length in pixels; `None` means half the image width.
    pub focal: Option<f64>,
    pub vp_count: usize,
    /// Make three vanishing directions mutually orthogonal.
    pub orthogonal: bool,
    /// Largest angle between a vanishing direction and the optical axis
    /// (non-orthogonal scenes).
    pub max_vp_angle: f64,
    pub lines_per_vp: usize,
    pub clutter_lines: usize,
    pub line_width: f64,
    /// Stroke intensities are drawn uniformly from this range.
    pub intensity: (f64, f64),
    /// Segment lengths, as fractions of the image size.
    pub length: (f64, f64),
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 128,
            focal: None,
            vp_count: 1,
            orthogonal: false,
            max_vp_angle: 60f64.to_radians(),
            lines_per_vp: 8,
            clutter_lines: 4,
            line_width: 1.0,
            intensity: (0.5, 1.0),
            length: (0.3, 0.7),
            background: 0.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 64 {
            return bad(format!("image_size must be at least 64, got {}", self.image_size));
        }
        if !(1..=3).contains(&self.vp_count) {
            return bad(format!("vp_count must be 1, 2 or 3, got {}", self.vp_count));
        }
        if self.orthogonal && self.vp_count != 3 {
            return bad("orthogonal scenes have exactly 3 vanishing points".into());
        }
        if !(self.max_vp_angle > 0.0 && self.max_vp_angle <= std::f64::consts::FRAC_PI_2) {
            return bad(format!("max_vp_angle must lie in (0, pi/2], got {}", self.max_vp_angle));
        }
        if let Some(f) = self.focal {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("focal length must be positive, got {f}"));
            }
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad(format!("intensity range {lo}..{hi} must lie in [0, 1]"));
        }
        let (lo, hi) = self.length;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("length range {lo}..{hi} is empty"));
        }
        if !(self.line_width > 0.0) || !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return bad("line_width must be positive, noise_sigma nonnegative, background in [0, 1]".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::for_image(self.image_size, self.image_size, self.focal)
    }
}

/// A rendered stroke; `vp` is the index of its vanishing direction, `None`
/// for clutter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: ImagePoint,
    pub end: ImagePoint,
    pub vp: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `1 x 1 x S x S`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    pub directions: Vec<UnitDirection>,
    pub intrinsics: CameraIntrinsics,
    pub segments: Vec<Segment>,
}

fn sample_directions(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<UnitDirection> {
    if spec.orthogonal {
        loop {
            let a = sample_hemisphere_uniform(rng).to_array();
            let r = sample_hemisphere_uniform(rng).to_array();
            let proj: f64 = a.iter().zip(&r).map(|(x, y)| x * y).sum();
            let b = [r[0] - proj * a[0], r[1] - proj * a[1], r[2] - proj * a[2]];
            let c = [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            let dirs: Option<Vec<UnitDirection>> = [a, b, c].into_iter().map(UnitDirection::from_array).collect();
            if let Some(d) = dirs {
                return d;
            }
        }
    }
    (0..spec.vp_count)
        .map(|_| sample_cap_uniform(&UnitDirection::OPTICAL_AXIS, 0.0, spec.max_vp_angle, rng))
        .collect()
}

/// Segment endpoints through `anchor` along unit vector `u`.
fn segment_around(anchor: ImagePoint, u: [f64; 2], length: f64, rng: &mut ChaCha8Rng) -> (ImagePoint, ImagePoint) {
    let before = length * rng.gen::<f64>();
    let after = length - before;
    (
        ImagePoint::new(anchor.u - before * u[0], anchor.v - before * u[1]),
        ImagePoint::new(anchor.u + after * u[0], anchor.v + after * u[1]),
    )
}

fn distance_to_segment(px: f64, py: f64, s: &Segment) -> f64 {
    let (ax, ay, bx, by) = (s.start.u, s.start.v, s.end.u, s.end.v);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Renders one scene. Identical specs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics()?;
    let s = spec.image_size;
    let size = s as f64;
    let directions = sample_directions(spec, &mut rng);

    let mut segments = Vec::new();
    let mut intensities = Vec::new();
    let length = |rng: &mut ChaCha8Rng| size * rng.gen_range(spec.length.0..=spec.length.1);
    for (vi, d) in directions.iter().enumerate() {
        let vp = direction_to_vp_or_far(d, &k, FAR_POINT_DISTANCE);
        for _ in 0..spec.lines_per_vp {
            let anchor = ImagePoint::new(rng.gen_range(0.0..size - 1.0), rng.gen_range(0.0..size - 1.0));
            let (dx, dy) = (vp.u - anchor.u, vp.v - anchor.v);
            let norm = dx.hypot(dy);
            let u = if norm > 1e-9 { [dx / norm, dy / norm] } else { [1.0, 0.0] };
            let len = length(&mut rng);
            let (start, end) = segment_around(anchor, u, len, &mut rng);
            segments.push(Segment { start, end, vp: Some(vi) });
            intensities.push(rng.gen_range(spec.intensity.0..=spec.intensity.1));
        }
    }
    for _ in 0..spec.clutter_lines {
        let anchor = ImagePoint::new(rng.gen_range(0.0..size - 1.0), rng.gen_range(0.0..size - 1.0));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let len = length(&mut rng);
        let (start, end) = segment_around(anchor, [angle.cos(), angle.sin()], len, &mut rng);
        segments.push(Segment { start, end, vp: None });
        intensities.push(rng.gen_range(spec.intensity.0..=spec.intensity.1));
    }

    let half = spec.line_width / 2.0;
    let mut pixels = vec![spec.background; s * s];
    for (seg, &level) in segments.iter().zip(&intensities) {
        let (x0, x1) = (seg.start.u.min(seg.end.u), seg.start.u.max(seg.end.u));
        let (y0, y1) = (seg.start.v.min(seg.end.v), seg.start.v.max(seg.end.v));
        let reach = half + 1.0;
        let xs = ((x0 - reach).floor().max(0.0) as usize)..=((x1 + reach).ceil().min(size - 1.0).max(0.0) as usize);
        let ys = ((y0 - reach).floor().max(0.0) as usize)..=((y1 + reach).ceil().min(size - 1.0).max(0.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let coverage = (half + 0.5 - distance_to_segment(x as f64, y as f64, seg)).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = spec.background + (level - spec.background) * coverage;
                    let p = &mut pixels[y * s + x];
                    if (v - spec.background).abs() > (*p - spec.background).abs() {
                        *p = v;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut pixels {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let image = Tensor4::from_vec(Shape4::new(1, 1, s, s), pixels.into_iter().map(|v| v as f32).collect())?;
    Ok(Scene {
        image,
        directions,
        intrinsics: k,
        segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Stable split assignment from the dataset seed and sample index.
pub fn split_of(seed: u64, index: usize, val_fraction: f64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    rng.set_stream(index as u64);
    if rng.gen::<f64>() < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

/// Per-sample scene seed derived from the dataset seed and index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Label {
    pub version: u32,
    pub index: usize,
    pub seed: u64,
    pub directions: Vec<UnitDirection>,
    pub image_points: Vec<Option<[f64; 2]>>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub intrinsics: CameraIntrinsics,
    pub val_fraction: f64,
    pub spec: SceneSpec,
    pub samples: Vec<IndexEntry>,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn to_gray8(image: &Tensor4<f32>) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes `count` scenes under `out_dir`:
/// `index.json`, `images/NNNNNN.png`, `labels/NNNNNN.json`.
/// `template.seed` is the dataset seed.
pub fn generate_dataset(template: &SceneSpec, count: usize, val_fraction: f64, out_dir: &Path) -> Result<DatasetIndex> {
    template.validate()?;
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val_fraction {val_fraction} outside [0, 1]")));
    }
    for sub in ["images", "labels"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let k = template.intrinsics()?;
    let samples: Vec<IndexEntry> = (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: sample_seed(template.seed, i),
                ..template.clone()
            };
            let scene = generate_scene(&spec)?;
            let id = format!("{i:06}");
            let image = format!("images/{id}.png");
            let label = format!("labels/{id}.json");
            let png = out_dir.join(&image);
            let s = template.image_size as u32;
            image::save_buffer(&png, &to_gray8(&scene.image), s, s, image::ColorType::L8)
                .map_err(|e| Error::format(&png, e.to_string()))?;
            let record = Label {
                version: DATASET_VERSION,
                index: i,
                seed: spec.seed,
                image_points: scene
                    .directions
                    .iter()
                    .map(|d| direction_to_vp(d, &k).map(|p| [p.u, p.v]))
                    .collect(),
                directions: scene.directions,
                intrinsics: k,
            };
            write_json(&out_dir.join(&label), &record)?;
            Ok(IndexEntry {
                id,
                image,
                label,
                split: split_of(template.seed, i, val_fraction),
            })
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        version: DATASET_VERSION,
        seed: template.seed,
        image_size: template.image_size,
        intrinsics: k,
        val_fraction,
        spec: template.clone(),
        samples,
    };
    write_json(&out_dir.join("index.json"), &index)?;
    Ok(index)
}

/// A dataset directory opened through its index.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("index.json");
        let index: DatasetIndex = read_json(&path)?;
        if index.version != DATASET_VERSION {
            return Err(Error::format(
                &path,
                format!("dataset version {} is not supported (expected {DATASET_VERSION})", index.version),
            ));
        }
        Ok(Dataset { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    /// Positions of the samples in `split`.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.index.samples[i].split == split).collect()
    }

    pub fn label(&self, i: usize) -> Result<Label> {
        read_json(&self.root.join(&self.index.samples[i].label))
    }

    /// Image `i` as `1 x 1 x S x S`, normalized to `[-1, 1]`.
    pub fn image(&self, i: usize) -> Result<Tensor4<f32>> {
        load_image(&self.root.join(&self.index.samples[i].image))
    }
}

/// Reads an 8-bit grayscale (or color, converted to luma) image and maps it
/// to `[-1, 1]`, shape `1 x 1 x H x W`.
pub fn load_image(path: &Path) -> Result<Tensor4<f32>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 127.5 - 1.0).collect();
    Tensor4::from_vec(Shape4::new(1, 1, h as usize, w as usize), data)
}
