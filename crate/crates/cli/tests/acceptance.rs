//! One pass/fail line per acceptance criterion.
//!
//! `ACCEPTANCE_ONLY=1,5,7` runs a subset. Criterion 8 trains six desk-scale
//! models and dominates the runtime.
//!
//! The exit code is nonzero when any criterion fails, except for failures
//! that only reflect the machine (fewer than 8 cores for a scaling
//! measurement); those still print FAIL.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use conic_vp::conic_conv::{
    build_conic_frame, conic_conv_backward, conic_conv_fast, conic_conv_reference, ConicConvLayer, ConicFrame,
};
use conic_vp::eval::{angle_accuracy, match_predictions, AaCurve};
use conic_vp::geometry::angular_distance;
use conic_vp::gradcheck;
use conic_vp::inference::{derive_threshold_schedule, detect, OracleScorer, SearchConfig};
use conic_vp::nn::{conv2d_backward, conv2d_forward, ConvSpec};
use conic_vp::sphere_sampling::{
    covering_angle, fibonacci_cap_sample, sample_cap_uniform, sample_hemisphere_uniform, SphericalCap,
    DEFAULT_GRID_FACTOR,
};
use conic_vp::{ImagePoint, Scalar, Shape4, Tensor4, UnitDirection};
use conic_vp_cli::{cmd_bench, cmd_detect_dataset, cmd_eval, cmd_synth, cmd_train, RunConfig, SplitArg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Covering angle of the 64-point hemisphere lattice, from the exhaustive
/// circumcenter oracle in the core crate's sampling tests.
const HEMISPHERE_64_COVERING: f64 = 0.2577830498;

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure caused only by the machine, not the code.
    environment_limited: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            detail,
            environment_limited: false,
        }
    }
}

fn layer<T: Scalar>(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> ConicConvLayer<T> {
    let mut l = ConicConvLayer::new("conic", c_in, c_out, rng);
    for b in l.bias.tensor.data_mut() {
        *b = T::of(rng.gen_range(-0.5..0.5));
    }
    l
}

fn operator_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(1..=8);
        let (c_in, c_out) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (h, w) = (rng.gen_range(3..=32), rng.gen_range(3..=32));
        let x = Tensor4::<f32>::random_uniform(Shape4::new(n, c_in, h, w), 1.0, &mut rng);
        let (wf, hf) = (w as f64, h as f64);
        let frames: Vec<ConicFrame<f32>> = (0..n)
            .map(|i| {
                let v = match (case + i) % 4 {
                    0 => ImagePoint::new(rng.gen_range(0.0..wf - 1.0), rng.gen_range(0.0..hf - 1.0)),
                    1 => ImagePoint::new(rng.gen_range(-3.0 * wf..4.0 * wf), -rng.gen_range(2.0..50.0) * hf),
                    2 => ImagePoint::new(0.0, rng.gen_range(0.0..hf - 1.0)),
                    _ => ImagePoint::new(rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64),
                };
                build_conic_frame(h, w, v)
            })
            .collect();
        let l = layer::<f32>(c_in, c_out, &mut rng);
        let fast = conic_conv_fast(&x, &frames, &l).unwrap();
        let reference = conic_conv_reference(&x, &frames, &l).unwrap();
        worst = worst.max(fast.max_abs_diff(&reference));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-5 && secs < 60.0,
        format!("200 cases, max abs diff {worst:.2e} (< 1e-5), {secs:.1}s (< 60s)"),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let single = gradcheck::check_all::<f32>(7);
    let double = gradcheck::check_all::<f64>(7);
    let secs = start.elapsed().as_secs_f64();
    fn worst(v: &[(&'static str, f64)]) -> (&'static str, f64) {
        v.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
    let (w32, w64) = (worst(&single), worst(&double));
    let names: Vec<&str> = single.iter().map(|(n, _)| *n).collect();
    Outcome::new(
        w32.1 < 1e-3 && w64.1 < 1e-6 && secs < 120.0,
        format!(
            "{}: worst f32 {:.2e} ({}) < 1e-3, worst f64 {:.2e} ({}) < 1e-6, {secs:.1}s",
            names.join("/"),
            w32.1,
            w32.0,
            w64.1,
            w64.0
        ),
    )
}

fn degenerate_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (12, 15);
    let x = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, h, w), 1.0, &mut rng);
    let v = ImagePoint::new((w as f64 - 1.0) / 2.0 + 1e6, (h as f64 - 1.0) / 2.0);
    let frames = [build_conic_frame::<f32>(h, w, v)];
    let mut conic = layer::<f32>(3, 4, &mut rng);
    let spec = ConvSpec::new(3, 1, 1);
    let y_conic = conic_conv_fast(&x, &frames, &conic).unwrap();
    let y_plain = conv2d_forward(&x, &conic.weight.tensor, conic.bias.value(), spec).unwrap();
    let fwd = y_conic.max_abs_diff(&y_plain);

    let g = Tensor4::<f32>::random_uniform(y_conic.shape(), 1.0, &mut rng);
    conic.weight.zero_grad();
    conic.bias.zero_grad();
    let gx_conic = conic_conv_backward(&g, &x, &frames, &mut conic).unwrap();
    let mut gw = vec![0.0f32; conic.weight.len()];
    let mut gb = vec![0.0f32; conic.bias.len()];
    let gx_plain = conv2d_backward(&g, &x, &conic.weight.tensor, spec, &mut gw, &mut gb).unwrap();
    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    let bwd = gx_conic
        .max_abs_diff(&gx_plain)
        .max(diff(conic.weight.grad(), &gw))
        .max(diff(conic.bias.grad(), &gb));
    Outcome::new(
        fwd < 1e-3 && bwd < 1e-3,
        format!("forward {fwd:.2e}, backward {bwd:.2e} (< 1e-3)"),
    )
}

fn rotation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let size = 33;
    let c = 16;
    let frame = [build_conic_frame::<f32>(size, size, ImagePoint::new(c as f64, c as f64))];
    let l = layer::<f32>(3, 4, &mut rng);
    let rotate = |t: &Tensor4<f32>| {
        let s = t.shape();
        let mut out = Tensor4::zeros(s);
        for ch in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    *out.at_mut(0, ch, x, 2 * c - y) = t.at(0, ch, y, x);
                }
            }
        }
        out
    };
    let x = Tensor4::<f32>::random_uniform(Shape4::new(1, 3, size, size), 1.0, &mut rng);
    let a = rotate(&conic_conv_fast(&x, &frame, &l).unwrap());
    let b = conic_conv_fast(&rotate(&x), &frame, &l).unwrap();
    let mut worst = 0.0f64;
    for ch in 0..4 {
        for y in 0..size {
            for x in 0..size {
                if (x, y) != (c, c) {
                    worst = worst.max((a.at(0, ch, y, x) - b.at(0, ch, y, x)).abs() as f64);
                }
            }
        }
    }
    Outcome::new(worst < 1e-4, format!("33x33, max diff {worst:.2e} (< 1e-4), center pixel excluded"))
}

fn ks_statistic(mut xs: Vec<f64>, f: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let fx = f(x);
            (fx - i as f64 / n).abs().max(((i + 1) as f64 / n - fx).abs())
        })
        .fold(0.0, f64::max)
}

fn sampler_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut centers_exact = true;
    let mut inside = true;
    for _ in 0..50 {
        let c = sample_hemisphere_uniform(&mut rng);
        let gamma = rng.gen_range(1e-3..FRAC_PI_2);
        let cap = SphericalCap::new(c, gamma).unwrap();
        let pts = fibonacci_cap_sample(&cap, rng.gen_range(1..300));
        centers_exact &= pts[0] == c;
        inside &= pts.iter().all(|p| angular_distance(p, &c) <= gamma + 1e-9);
    }

    let center = UnitDirection::new(-0.2, 0.4, 1.0).unwrap();
    let gamma = 0.5;
    let cc = center.to_array();
    let cosines: Vec<f64> = (0..100_000)
        .map(|_| {
            let d = sample_cap_uniform(&center, 0.0, gamma, &mut rng).to_array();
            (d[0] * cc[0] + d[1] * cc[1] + d[2] * cc[2]).abs()
        })
        .collect();
    let lo = gamma.cos();
    let ks = ks_statistic(cosines, |x| ((x - lo) / (1.0 - lo)).clamp(0.0, 1.0));

    let hemi = SphericalCap::hemisphere();
    let cov = covering_angle(&fibonacci_cap_sample(&hemi, 64), &hemi, DEFAULT_GRID_FACTOR);
    let cov_err = (cov - HEMISPHERE_64_COVERING).abs();
    Outcome::new(
        centers_exact && inside && ks < 0.01 && cov_err < 1e-3,
        format!(
            "n=0 is the center: {centers_exact}, inside cap: {inside}, KS {ks:.4} (< 0.01, 1e5 draws), covering {cov:.6} vs {HEMISPHERE_64_COVERING} (err {cov_err:.1e} < 1e-3)"
        ),
    )
}

fn search_correctness() -> Outcome {
    let cfg = SearchConfig::default();
    let schedule = derive_threshold_schedule(&cfg).unwrap();
    let finest = schedule.finest();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut found, mut counts_ok, mut worst) = (0, true, 0.0f64);
    for _ in 0..100 {
        let truth = sample_hemisphere_uniform(&mut rng);
        let mut scorer = OracleScorer::new(vec![truth]);
        let r = detect(&mut scorer, &cfg, &schedule).unwrap();
        let err = angular_distance(&r.detections[0].direction, &truth);
        worst = worst.max(err);
        found += (err <= finest) as usize;
        counts_ok &= scorer.evaluations() == cfg.rounds * cfg.samples;
    }
    Outcome::new(
        found == 100 && counts_ok,
        format!(
            "{found}/100 within {:.4} deg (worst {:.4} deg), head evaluations = 256 per VP: {counts_ok}",
            finest.to_degrees(),
            worst.to_degrees()
        ),
    )
}

fn metric_correctness() -> Outcome {
    let curve = AaCurve::from_errors([0.5f64.to_radians(), 1.5f64.to_radians()]).unwrap();
    let aa = angle_accuracy(&curve, 2f64.to_radians()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut agree = 0;
    for _ in 0..1000 {
        let hub = sample_hemisphere_uniform(&mut rng);
        let spread = rng.gen_range(0.005..0.2);
        let gts: Vec<_> = (0..3).map(|_| sample_cap_uniform(&hub, 0.0, spread, &mut rng)).collect();
        let preds: Vec<_> = (0..3)
            .map(|_| {
                let near = gts[rng.gen_range(0..3)];
                sample_cap_uniform(&near, 0.0, spread * rng.gen_range(0.3..1.5), &mut rng)
            })
            .collect();
        let oracle = perms
            .iter()
            .map(|p| (0..3).map(|i| angular_distance(&preds[i], &gts[p[i]])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let total: f64 = match_predictions(&preds, &gts).pairs.iter().map(|p| p.error).sum();
        agree += ((total - oracle).abs() < 1e-12) as usize;
    }
    Outcome::new(
        aa == 0.5 && agree == 1000,
        format!("AA^2({{0.5, 1.5}} deg) = {aa}, matching agrees with permutation oracle on {agree}/1000"),
    )
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_scale.toml");
    RunConfig::load(Some(&path), &[]).expect("desk-scale config")
}

struct DeskRun {
    median_deg: f64,
    aa2: f64,
    train_secs: f64,
}

fn desk_run(cfg: &RunConfig, data: &Path, dir: &Path, name: &str) -> DeskRun {
    let model = dir.join(format!("{name}.bin"));
    let start = Instant::now();
    cmd_train(cfg, data, &model, None, |l| {
        eprintln!("  [{name}] epoch {} loss {:.4} {:.0}s", l.epoch, l.loss, l.seconds)
    })
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let preds = cmd_detect_dataset(cfg, &model, data, SplitArg::Val).unwrap();
    let cfg2 = RunConfig {
        thresholds_deg: vec![2.0],
        ..cfg.clone()
    };
    let (_, summary) = cmd_eval(&cfg2, &preds, data, SplitArg::Val).unwrap();
    DeskRun {
        median_deg: summary.median_deg,
        aa2: summary.aa(2.0).unwrap(),
        train_secs,
    }
}

fn desk_scale_effect() -> Outcome {
    let base = desk_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&base, &data).unwrap();
    let mut lines = Vec::new();
    let (mut wins, mut losses) = (0, 0);
    for seed in 0..3u64 {
        let cfg = RunConfig {
            init_seed: seed,
            train_seed: seed,
            ..base.clone()
        };
        let conic = desk_run(&cfg, &data, tmp.path(), &format!("conic{seed}"));
        let plain_cfg = RunConfig {
            head_mode: conic_vp::network::HeadMode::Plain,
            ..cfg
        };
        let plain = desk_run(&plain_cfg, &data, tmp.path(), &format!("plain{seed}"));
        let ok = conic.median_deg < 2.0
            && conic.aa2 - plain.aa2 >= 0.10
            && conic.train_secs <= 1800.0
            && plain.train_secs <= 1800.0;
        lines.push(format!(
            "seed {seed}: conic median {:.2} deg AA2 {:.3} ({:.0}s), plain AA2 {:.3} ({:.0}s) -> {}",
            conic.median_deg,
            conic.aa2,
            conic.train_secs,
            plain.aa2,
            plain.train_secs,
            if ok { "ok" } else { "no" }
        ));
        if ok {
            wins += 1;
        } else {
            losses += 1;
        }
        // the majority is decided
        if wins == 2 || losses == 2 {
            break;
        }
    }
    Outcome::new(wins >= 2, format!("{}; majority needs 2 of 3", lines.join("; ")))
}

fn performance() -> Outcome {
    let shape = Shape4::new(1, 64, 64, 64);
    let rows = cmd_bench(shape, &[1, 8], 5).unwrap();
    let reference = rows[0].mpix_per_s;
    let (one, eight) = (rows[1].mpix_per_s, rows[2].mpix_per_s);
    let speedup = one / reference;
    let scaling = eight / one;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let pass = speedup >= 5.0 && scaling >= 3.0;
    Outcome {
        pass,
        detail: format!(
            "fast/reference single-thread {speedup:.1}x (>= 5), 1->8 workers {scaling:.2}x (>= 3) on {cores} core(s)"
        ),
        environment_limited: !pass && speedup >= 5.0 && cores < 8,
    }
}

fn pipeline_determinism() -> Outcome {
    let cfg = RunConfig::load(
        None,
        &[
            "image_size=64".into(),
            "dataset_count=48".into(),
            "val_fraction=0.25".into(),
            "stem_channels=4".into(),
            "feature_channels=8".into(),
            "reduced_channels=4".into(),
            "stage_channels=[4, 8, 16, 32]".into(),
            "fc_hidden=8".into(),
            "epochs=2".into(),
            "lr=0.002".into(),
            "batch_size=8".into(),
        ],
    )
    .unwrap();
    let run = || {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let model = tmp.path().join("model.bin");
        cmd_synth(&cfg, &data).unwrap();
        cmd_train(&cfg, &data, &model, None, |_| {}).unwrap();
        let preds = cmd_detect_dataset(&cfg, &model, &data, SplitArg::Val).unwrap();
        let (_, summary) = cmd_eval(&cfg, &preds, &data, SplitArg::Val).unwrap();
        (std::fs::read(&model).unwrap(), serde_json::to_string(&summary).unwrap())
    };
    let (a, b) = (run(), run());
    Outcome::new(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "model bytes identical: {} ({} bytes), AA summaries identical: {}",
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "operator correctness", operator_correctness),
        (2, "gradient fidelity", gradient_fidelity),
        (3, "degenerate reduction", degenerate_reduction),
        (4, "rotation equivariance", rotation_equivariance),
        (5, "sampler correctness", sampler_correctness),
        (6, "search correctness", search_correctness),
        (7, "metric correctness", metric_correctness),
        (8, "desk-scale effect", desk_scale_effect),
        (9, "performance", performance),
        (10, "pipeline determinism", pipeline_determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut hard_failures = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let status = match (outcome.pass, outcome.environment_limited) {
            (true, _) => "PASS",
            (false, true) => "FAIL (machine-limited)",
            (false, false) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {id:>2} {status}: {name}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
