//! Candidate directions on the Gaussian sphere.
//!
//! Inference scans spherical caps with a Fibonacci lattice whose first point
//! is the cap center; training draws area-uniform positives around each
//! ground truth, negatives from the surrounding annulus, and a few directions
//! from the whole hemisphere.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, cross, UnitDirection};

/// Default ratio between covering-grid size and sample count.
pub const DEFAULT_GRID_FACTOR: usize = 256;

/// Region of the sphere within `polar_angle` of `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalCap {
    pub center: UnitDirection,
    pub polar_angle: f64,
}

impl SphericalCap {
    pub fn new(center: UnitDirection, polar_angle: f64) -> Result<Self> {
        if !(polar_angle > 0.0 && polar_angle <= FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "cap polar angle must lie in (0, pi/2], got {polar_angle}"
            )));
        }
        Ok(SphericalCap {
            center,
            polar_angle,
        })
    }

    /// The visible hemisphere, where the search starts.
    pub fn hemisphere() -> Self {
        SphericalCap {
            center: UnitDirection::OPTICAL_AXIS,
            polar_angle: FRAC_PI_2,
        }
    }

    fn contains_raw(&self, w: [f64; 3]) -> bool {
        let c = self.center.to_array();
        let dot = w[0] * c[0] + w[1] * c[1] + w[2] * c[2];
        dot.clamp(-1.0, 1.0).acos() <= self.polar_angle + 1e-12
    }
}

/// A candidate with one label per threshold: is some ground truth closer than
/// that threshold?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLabel {
    pub direction: UnitDirection,
    pub labels: Vec<bool>,
}

impl CandidateLabel {
    pub fn new(direction: UnitDirection, gts: &[UnitDirection], thresholds: &[f64]) -> Self {
        let nearest = gts
            .iter()
            .map(|g| angular_distance(&direction, g))
            .fold(f64::INFINITY, f64::min);
        CandidateLabel {
            direction,
            labels: thresholds.iter().map(|&t| nearest < t).collect(),
        }
    }
}

/// Two unit vectors completing `n` to an orthonormal triad.
pub fn orthonormal_basis(n: &UnitDirection) -> (UnitDirection, UnitDirection) {
    let (a, b) = raw_basis(n.to_array());
    (
        UnitDirection::new(a[0], a[1], a[2]).expect("unit"),
        UnitDirection::new(b[0], b[1], b[2]).expect("unit"),
    )
}

fn raw_basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // Cross with the axis least aligned with `n`; first index wins ties.
    let abs = n.map(f64::abs);
    let mut axis = 0;
    for i in 1..3 {
        if abs[i] < abs[axis] {
            axis = i;
        }
    }
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let a = normalize(cross(n, e));
    let b = normalize(cross(n, a));
    (a, b)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / norm)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn on_cap(n: [f64; 3], a: [f64; 3], b: [f64; 3], cos_phi: f64, theta: f64) -> [f64; 3] {
    let sin_phi = (1.0 - cos_phi * cos_phi).max(0.0).sqrt();
    let (st, ct) = theta.sin_cos();
    [
        cos_phi * n[0] + sin_phi * (ct * a[0] + st * b[0]),
        cos_phi * n[1] + sin_phi * (ct * a[1] + st * b[1]),
        cos_phi * n[2] + sin_phi * (ct * a[2] + st * b[2]),
    ]
}

/// One lattice point with its polar and azimuthal angles in the cap frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticePoint {
    pub index: usize,
    pub direction: UnitDirection,
    pub phi: f64,
    pub theta: f64,
}

/// Fibonacci lattice of `count` points in `cap`, with angles.
///
/// Point `i` sits at `cos(phi) = 1 - (1 - cos(gamma)) * i / count` and azimuth
/// `(1 + sqrt 5) * pi * i`, so the cosine schedule is linear (area-uniform) and
/// successive azimuths advance by the golden angle. Point 0 is the center.
pub fn fibonacci_cap_lattice(cap: &SphericalCap, count: usize) -> Vec<LatticePoint> {
    let n = cap.center.to_array();
    let (a, b) = raw_basis(n);
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let one_minus_cos = 1.0 - cap.polar_angle.cos();
    (0..count)
        .map(|i| {
            let cos_phi = 1.0 - one_minus_cos * i as f64 / count as f64;
            // (1 + sqrt 5) * pi * i reduced mod 2 pi without losing precision.
            let theta = 2.0 * PI * (golden * i as f64).fract();
            let direction = if i == 0 {
                cap.center
            } else {
                canonical_unit(on_cap(n, a, b, cos_phi, theta))
            };
            LatticePoint {
                index: i,
                direction,
                phi: cos_phi.clamp(-1.0, 1.0).acos(),
                theta,
            }
        })
        .collect()
}

/// Fibonacci lattice directions of `count` points in `cap`.
pub fn fibonacci_cap_sample(cap: &SphericalCap, count: usize) -> Vec<UnitDirection> {
    fibonacci_cap_lattice(cap, count)
        .into_iter()
        .map(|p| p.direction)
        .collect()
}

fn canonical_unit(v: [f64; 3]) -> UnitDirection {
    UnitDirection::new(v[0], v[1], v[2]).expect("lattice points are unit vectors")
}

/// Largest angle from a point of `cap` to its nearest sample (antipodes
/// identified), using a Fibonacci grid of `grid_factor * samples.len()` points
/// followed by exact local refinement.
///
/// The refinement enumerates, around the best grid points, the candidate
/// maximizers of the nearest-sample distance: circumcenters of sample
/// triples, cap-boundary points equidistant from two samples, and the
/// boundary point farthest from a single sample. Every candidate is scored
/// with the true distance function, so the result never exceeds the exact
/// covering angle.
pub fn covering_angle(samples: &[UnitDirection], cap: &SphericalCap, grid_factor: usize) -> f64 {
    assert!(!samples.is_empty(), "covering_angle needs at least one sample");
    let sites: Vec<[f64; 3]> = samples
        .iter()
        .flat_map(|s| {
            let a = s.to_array();
            [a, a.map(|v| -v)]
        })
        .collect();
    let nearest = |w: [f64; 3]| -> f64 {
        let best = sites.iter().map(|&s| dot(w, s)).fold(f64::MIN, f64::max);
        best.clamp(-1.0, 1.0).acos()
    };

    let grid = fibonacci_cap_sample(cap, grid_factor.max(1) * samples.len());
    let mut scored: Vec<(f64, usize)> = grid
        .iter()
        .enumerate()
        .map(|(i, g)| (nearest(g.to_array()), i))
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut best = scored[0].0;

    let center = cap.center.to_array();
    let (ca, cb) = raw_basis(center);
    let (sin_g, cos_g) = cap.polar_angle.sin_cos();
    let boundary = |t: f64| {
        let (st, ct) = t.sin_cos();
        [
            cos_g * center[0] + sin_g * (ct * ca[0] + st * cb[0]),
            cos_g * center[1] + sin_g * (ct * ca[1] + st * cb[1]),
            cos_g * center[2] + sin_g * (ct * ca[2] + st * cb[2]),
        ]
    };
    let mut consider = |w: [f64; 3]| {
        for cand in [w, w.map(|v| -v)] {
            if cap.contains_raw(cand) {
                best = best.max(nearest(cand));
            }
        }
    };

    const SEEDS: usize = 256;
    const NEIGHBORS: usize = 6;
    for &(_, gi) in scored.iter().take(SEEDS) {
        let g = grid[gi].to_array();
        let mut near: Vec<(f64, usize)> = sites
            .iter()
            .enumerate()
            .map(|(i, &s)| (-dot(g, s), i))
            .collect();
        let k = NEIGHBORS.min(near.len());
        near.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let near: Vec<[f64; 3]> = near[..k].iter().map(|&(_, i)| sites[i]).collect();

        for i in 0..k {
            let p = near[i];
            // Boundary point farthest from a single site.
            let t = (-dot(cb, p)).atan2(-dot(ca, p));
            consider(boundary(t));
            for j in i + 1..k {
                let q = near[j];
                let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                // Boundary points on the bisector of p and q.
                let a_coef = sin_g * dot(diff, ca);
                let b_coef = sin_g * dot(diff, cb);
                let c_coef = cos_g * dot(diff, center);
                let r = a_coef.hypot(b_coef);
                if r > 1e-15 && c_coef.abs() <= r {
                    let base = b_coef.atan2(a_coef);
                    let off = (-c_coef / r).acos();
                    consider(boundary(base + off));
                    consider(boundary(base - off));
                }
                for &s in &near[j + 1..] {
                    let e1 = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                    let e2 = [s[0] - p[0], s[1] - p[1], s[2] - p[2]];
                    let c = cross(e1, e2);
                    let norm = dot(c, c).sqrt();
                    if norm > 1e-15 {
                        consider(c.map(|v| v / norm));
                    }
                }
            }
        }
    }
    best
}

/// Area-uniform direction with polar angle (from `center`) in
/// `(min_angle, max_angle)`, endpoints excluded.
pub fn sample_cap_uniform<R: Rng + ?Sized>(
    center: &UnitDirection,
    min_angle: f64,
    max_angle: f64,
    rng: &mut R,
) -> UnitDirection {
    let n = center.to_array();
    let (a, b) = raw_basis(n);
    let (hi, lo) = (min_angle.cos(), max_angle.cos());
    loop {
        let cos_phi = lo + (hi - lo) * rng.gen::<f64>();
        let phi = cos_phi.clamp(-1.0, 1.0).acos();
        if !(phi > min_angle && phi < max_angle) {
            continue;
        }
        let theta = 2.0 * PI * rng.gen::<f64>();
        return canonical_unit(on_cap(n, a, b, cos_phi, theta));
    }
}

/// Area-uniform direction on the visible hemisphere.
pub fn sample_hemisphere_uniform<R: Rng + ?Sized>(rng: &mut R) -> UnitDirection {
    let cos_phi: f64 = rng.gen();
    let theta = 2.0 * PI * rng.gen::<f64>();
    canonical_unit(on_cap(
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        cos_phi,
        theta,
    ))
}

/// Training candidates for one image: per ground truth, `positives` draws
/// within `gamma` and `negatives` draws in the `(gamma, 2 gamma)` annulus, then
/// `random` hemisphere draws. Each is labeled against every threshold using
/// the nearest ground truth.
pub fn sample_training_candidates<R: Rng + ?Sized>(
    gts: &[UnitDirection],
    gamma: f64,
    thresholds: &[f64],
    positives: usize,
    negatives: usize,
    random: usize,
    rng: &mut R,
) -> Result<Vec<CandidateLabel>> {
    if !(gamma > 0.0 && gamma <= FRAC_PI_4) {
        return Err(Error::InvalidArgument(format!(
            "training cap angle must lie in (0, pi/4], got {gamma}"
        )));
    }
    let mut out = Vec::with_capacity(gts.len() * (positives + negatives) + random);
    for gt in gts {
        for _ in 0..positives {
            let d = sample_cap_uniform(gt, 0.0, gamma, rng);
            out.push(CandidateLabel::new(d, gts, thresholds));
        }
        for _ in 0..negatives {
            let d = sample_cap_uniform(gt, gamma, 2.0 * gamma, rng);
            out.push(CandidateLabel::new(d, gts, thresholds));
        }
    }
    for _ in 0..random {
        let d = sample_hemisphere_uniform(rng);
        out.push(CandidateLabel::new(d, gts, thresholds));
    }
    Ok(out)
}
