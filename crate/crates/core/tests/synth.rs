use conic_vp::geometry::direction_to_vp;
use conic_vp::synth_data::{generate_dataset, generate_scene, Dataset, SceneSpec, Split};

/// Least-squares intersection of the lines through each segment.
fn intersect(lines: &[([f64; 2], [f64; 2])]) -> [f64; 2] {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, q) in lines {
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len = dx.hypot(dy);
        let (nx, ny) = (-dy / len, dx / len);
        let c = nx * p[0] + ny * p[1];
        a11 += nx * nx;
        a12 += nx * ny;
        a22 += ny * ny;
        b1 += nx * c;
        b2 += ny * c;
    }
    let det = a11 * a22 - a12 * a12;
    [(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det]
}

#[test]
fn structural_lines_meet_at_the_label() {
    let mut checked = 0;
    for seed in 0..60 {
        let spec = SceneSpec {
            seed,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let Some(vp) = direction_to_vp(&scene.directions[0], &scene.intrinsics) else {
            continue;
        };
        let size = spec.image_size as f64;
        if !(0.0..size).contains(&vp.u) || !(0.0..size).contains(&vp.v) {
            continue;
        }
        let lines: Vec<_> = scene
            .segments
            .iter()
            .filter(|s| s.vp == Some(0))
            .map(|s| ([s.start.u, s.start.v], [s.end.u, s.end.v]))
            .collect();
        assert!(lines.len() >= spec.lines_per_vp);
        let x = intersect(&lines);
        assert!((x[0] - vp.u).hypot(x[1] - vp.v) < 1.0, "seed {seed}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} scenes had an in-image vanishing point");
}

#[test]
fn dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        image_size: 64,
        seed: 12,
        ..SceneSpec::default()
    };
    let index = generate_dataset(&spec, 40, 0.25, dir.path()).unwrap();
    assert_eq!(index.samples.len(), 40);

    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 40);
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    assert_eq!(train.len() + val.len(), 40);
    assert!(train.iter().all(|i| !val.contains(i)));
    assert!(!val.is_empty());

    for i in [0, 17, 39] {
        let label = ds.label(i).unwrap();
        let scene = generate_scene(&SceneSpec {
            seed: label.seed,
            ..spec.clone()
        })
        .unwrap();
        for (a, b) in label.directions.iter().zip(&scene.directions) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let img = ds.image(i).unwrap();
        assert_eq!(img.shape().h, 64);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // 8-bit quantization is the only loss
        for (a, b) in img.data().iter().zip(scene.image.data()) {
            assert!(((a + 1.0) / 2.0 - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    // same seed, same bytes
    let again = tempfile::tempdir().unwrap();
    generate_dataset(&spec, 40, 0.25, again.path()).unwrap();
    for f in ["index.json", "images/000005.png", "labels/000005.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_index_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::open(dir.path()).unwrap_err().to_string();
    assert!(err.contains("index.json"), "{err}");
}
