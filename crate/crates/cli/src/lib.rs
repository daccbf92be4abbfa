//! Subcommand implementations behind the `conic-vp` binary. Each is a thin
//! adapter over the library; the binary only parses arguments and prints.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use conic_vp::conic_conv::{build_conic_frame, conic_conv_fast, conic_conv_reference, ConicConvLayer};
use conic_vp::eval::{match_predictions, summarize, AaCurve, Prediction, Summary};
use conic_vp::inference::{derive_threshold_schedule, detect, ModelScorer};
use conic_vp::network::VpsModel;
use conic_vp::sphere_sampling::{covering_angle, fibonacci_cap_lattice, SphericalCap};
use conic_vp::synth_data::{generate_dataset, load_image, Dataset, DatasetIndex, Split};
use conic_vp::training::{load_model, save_model, train, EpochLog, ModelCard, Sample};
use conic_vp::{CameraIntrinsics, ImagePoint, Shape4, Tensor4};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

/// Which part of a dataset a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

fn select(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::All => (0..ds.len()).collect(),
    }
}

/// Writes `cfg.dataset_count` scenes to `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetIndex> {
    Ok(generate_dataset(&cfg.scene_spec()?, cfg.dataset_count, cfg.val_fraction, out_dir)?)
}

fn load_samples(ds: &Dataset, indices: &[usize]) -> Result<Vec<Sample>> {
    indices
        .par_iter()
        .map(|&i| {
            let label = ds.label(i)?;
            Ok(Sample {
                image: ds.image(i)?,
                intrinsics: label.intrinsics,
                directions: label.directions,
            })
        })
        .collect()
}

fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::open(dir)?;
    ensure!(
        ds.index.image_size == cfg.image_size,
        "dataset {} has {}px images but image_size = {}",
        dir.display(),
        ds.index.image_size,
        cfg.image_size
    );
    Ok(ds)
}

/// Trains on the train split of `dataset_dir` and writes the weights plus
/// sidecar. `log_csv`, when given, receives one `epoch,loss,seconds` row per
/// epoch.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_dir: &Path,
    model_path: &Path,
    log_csv: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let ds = open_dataset(cfg, dataset_dir)?;
    let train_idx = ds.split(Split::Train);
    ensure!(!train_idx.is_empty(), "dataset {} has no training samples", dataset_dir.display());
    let samples = load_samples(&ds, &train_idx)?;
    let search = cfg.search_config();
    let schedule = derive_threshold_schedule(&search)?;
    let mut model = VpsModel::<f32>::new(cfg.model_config(), cfg.init_seed)?;
    let mut csv = String::from("epoch,loss,seconds\n");
    let logs = train(&mut model, &samples, &schedule, &cfg.train_config(), |log| {
        writeln!(csv, "{},{:.6},{:.3}", log.epoch, log.loss, log.seconds).unwrap();
        progress(log);
    })?;
    let card = ModelCard::new(model.config(), &search, &schedule, ds.index.intrinsics, model_path);
    save_model(model_path, &model, &card)?;
    if let Some(p) = log_csv {
        std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(logs)
}

/// Loads a model and checks it against the search settings of `cfg`.
pub fn load_checked_model(cfg: &RunConfig, model_path: &Path) -> Result<(VpsModel<f32>, ModelCard)> {
    let (model, card) = load_model(model_path)?;
    card.check_search(&cfg.search_config())?;
    Ok((model, card))
}

fn predict_one(
    cfg: &RunConfig,
    model: &VpsModel<f32>,
    image_id: String,
    image: &Tensor4<f32>,
    intrinsics: CameraIntrinsics,
) -> Result<Prediction> {
    let search = cfg.search_config();
    let schedule = derive_threshold_schedule(&search)?;
    let mut scorer = ModelScorer::new(model, image, intrinsics)?;
    let result = detect(&mut scorer, &search, &schedule)?;
    Ok(Prediction {
        image_id,
        directions: result.detections.iter().map(|d| d.direction).collect(),
        scores: result.detections.iter().map(|d| d.score).collect(),
    })
}

/// Detects vanishing points in PNG files. Intrinsics follow the config
/// (`focal`, default half the width).
pub fn cmd_detect_images(cfg: &RunConfig, model_path: &Path, images: &[PathBuf]) -> Result<Vec<Prediction>> {
    let (model, _) = load_checked_model(cfg, model_path)?;
    images
        .iter()
        .map(|p| {
            let img = load_image(p)?;
            let s = img.shape();
            let k = CameraIntrinsics::for_image(s.w, s.h, cfg.focal)?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            predict_one(cfg, &model, id, &img, k).with_context(|| format!("detecting in {}", p.display()))
        })
        .collect()
}

/// Detects vanishing points for every image of a dataset split.
pub fn cmd_detect_dataset(
    cfg: &RunConfig,
    model_path: &Path,
    dataset_dir: &Path,
    split: SplitArg,
) -> Result<Vec<Prediction>> {
    let (model, _) = load_checked_model(cfg, model_path)?;
    let ds = open_dataset(cfg, dataset_dir)?;
    select(&ds, split)
        .par_iter()
        .map(|&i| {
            let label = ds.label(i)?;
            predict_one(cfg, &model, ds.index.samples[i].id.clone(), &ds.image(i)?, label.intrinsics)
        })
        .collect()
}

/// Matches predictions to the labels of a dataset split. Images without a
/// prediction count all their ground truths as unmatched.
pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &[Prediction],
    dataset_dir: &Path,
    split: SplitArg,
) -> Result<(AaCurve, Summary)> {
    let ds = Dataset::open(dataset_dir)?;
    let wanted = select(&ds, split);
    let mut by_id = std::collections::HashMap::new();
    for p in predictions {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            bail!("duplicate prediction for image {:?}", p.image_id);
        }
    }
    let ids: std::collections::HashSet<&str> = wanted.iter().map(|&i| ds.index.samples[i].id.as_str()).collect();
    if let Some(p) = predictions.iter().find(|p| !ids.contains(p.image_id.as_str())) {
        bail!("prediction for unknown image {:?}", p.image_id);
    }
    let mut curve = AaCurve::default();
    for &i in &wanted {
        let id = &ds.index.samples[i].id;
        let label = ds.label(i)?;
        let preds = by_id.get(id.as_str()).map(|p| p.directions.as_slice()).unwrap_or(&[]);
        curve.push(id, &match_predictions(preds, &label.directions));
    }
    let summary = summarize(&curve, &cfg.thresholds_deg)?;
    Ok((curve, summary))
}

/// Fibonacci lattice of `n` points on the cap of angle `gamma_deg` around
/// the optical axis, as CSV, followed by its covering angle as a comment.
pub fn cmd_sample(n: usize, gamma_deg: f64, grid_factor: usize) -> Result<String> {
    ensure!(n > 0, "need at least one sample");
    let cap = SphericalCap::new(conic_vp::UnitDirection::OPTICAL_AXIS, gamma_deg.to_radians())?;
    let pts = fibonacci_cap_lattice(&cap, n);
    let mut out = String::from("index,x,y,z,phi_deg,theta_deg\n");
    for p in &pts {
        let d = p.direction;
        writeln!(
            out,
            "{},{:.12},{:.12},{:.12},{:.9},{:.9}",
            p.index,
            d.x(),
            d.y(),
            d.z(),
            p.phi.to_degrees(),
            p.theta.to_degrees()
        )?;
    }
    let dirs: Vec<_> = pts.iter().map(|p| p.direction).collect();
    let cov = covering_angle(&dirs, &cap, grid_factor);
    writeln!(out, "# covering_angle_deg,{:.9}", cov.to_degrees())?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub workers: usize,
    pub seconds: f64,
    /// Output pixels per second, millions.
    pub mpix_per_s: f64,
}

/// Parses `NxCxHxW`.
pub fn parse_shape(s: &str) -> Result<Shape4> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("shape {s:?} is not NxCxHxW"))?;
    ensure!(parts.len() == 4 && parts.iter().all(|&v| v > 0), "shape {s:?} is not NxCxHxW");
    Ok(Shape4::new(parts[0], parts[1], parts[2], parts[3]))
}

fn time_best(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times the reference kernel on one worker and the fast kernel on each
/// worker count; `C_out = C_in`. Best of `repeats` runs.
pub fn cmd_bench(shape: Shape4, workers: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::<f32>::random_uniform(shape, 1.0, &mut rng);
    let layer = ConicConvLayer::<f32>::new("bench", shape.c, shape.c, &mut rng);
    let v = ImagePoint::new(shape.w as f64 * 0.3, -(shape.h as f64) * 0.7);
    let frames = [build_conic_frame::<f32>(shape.h, shape.w, v)];
    let pixels = (shape.n * shape.c * shape.h * shape.w) as f64;
    let pool = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")
    };
    let mut rows = Vec::new();
    let secs = pool(1)?.install(|| {
        time_best(1, || {
            conic_conv_reference(&x, &frames, &layer)?;
            Ok(())
        })
    })?;
    rows.push(BenchRow {
        kernel: "reference",
        workers: 1,
        seconds: secs,
        mpix_per_s: pixels / secs / 1e6,
    });
    for &w in workers {
        ensure!(w > 0, "worker counts must be positive");
        let secs = pool(w)?.install(|| {
            time_best(repeats, || {
                conic_conv_fast(&x, &frames, &layer)?;
                Ok(())
            })
        })?;
        rows.push(BenchRow {
            kernel: "fast",
            workers: w,
            seconds: secs,
            mpix_per_s: pixels / secs / 1e6,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("kernel,workers,seconds,mpix_per_s\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.3}", r.kernel, r.workers, r.seconds, r.mpix_per_s).unwrap();
    }
    out
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing predictions {}", path.display()))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
