//! Pinhole geometry between image-plane vanishing points and 3D line
//! directions on the Gaussian sphere.
//!
//! Image coordinates put the origin at the center of the top-left pixel, with
//! `u` growing rightward and `v` downward. A vanishing point `(u, v)` maps to
//! the ray `(u - cx, v - cy, f)`; directions are normalized and their sign is
//! fixed so that a direction and its antipode, which describe the same family
//! of parallel lines, share one representative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directions with `|z|` below this project to infinity.
pub const IDEAL_POINT_EPS: f64 = 1e-8;

/// Pinhole intrinsics with square pixels and no skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive and finite, got {f}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "optical center must be finite, got ({cx}, {cy})"
            )));
        }
        Ok(CameraIntrinsics { f, cx, cy })
    }

    /// Centered optical axis for a `width x height` image. Without a focal
    /// length the convention is half the image width.
    pub fn for_image(width: usize, height: usize, f: Option<f64>) -> Result<Self> {
        let f = f.unwrap_or(width as f64 / 2.0);
        Self::new(
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
    }
}

/// A point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        ImagePoint { u, v }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// A unit 3-vector with antipodes identified.
///
/// The stored sign is canonical: `z > 0`, or `z == 0 && x > 0`, or
/// `z == 0 && x == 0 && y > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitDirection {
    x: f64,
    y: f64,
    z: f64,
}

impl UnitDirection {
    /// Normalizes and canonicalizes `(x, y, z)`; `None` for a zero or
    /// non-finite vector.
    pub fn new(x: f64, y: f64, z: f64) -> Option<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return None;
        }
        let (x, y, z) = (x / norm, y / norm, z / norm);
        let flip = z < 0.0 || (z == 0.0 && (x < 0.0 || (x == 0.0 && y < 0.0)));
        Some(if flip {
            // `0.0 - 0.0` keeps zeros positive, unlike negation.
            UnitDirection {
                x: 0.0 - x,
                y: 0.0 - y,
                z: 0.0 - z,
            }
        } else {
            UnitDirection { x, y, z }
        })
    }

    pub fn from_array(v: [f64; 3]) -> Option<Self> {
        Self::new(v[0], v[1], v[2])
    }

    pub const OPTICAL_AXIS: UnitDirection = UnitDirection {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitDirection) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &UnitDirection) -> [f64; 3] {
        cross(self.to_array(), other.to_array())
    }
}

impl TryFrom<[f64; 3]> for UnitDirection {
    type Error = String;

    fn try_from(v: [f64; 3]) -> std::result::Result<Self, String> {
        UnitDirection::from_array(v).ok_or_else(|| format!("not a direction: {v:?}"))
    }
}

impl From<UnitDirection> for [f64; 3] {
    fn from(d: UnitDirection) -> Self {
        d.to_array()
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Line direction of the vanishing point `vp`.
pub fn vp_to_direction(vp: ImagePoint, k: &CameraIntrinsics) -> UnitDirection {
    UnitDirection::new(vp.u - k.cx, vp.v - k.cy, k.f)
        .expect("f > 0 keeps the ray nonzero")
}

/// Image of the direction's vanishing point, or `None` for directions parallel
/// to the image plane.
pub fn direction_to_vp(d: &UnitDirection, k: &CameraIntrinsics) -> Option<ImagePoint> {
    if d.z.abs() <= IDEAL_POINT_EPS {
        return None;
    }
    Some(ImagePoint::new(
        k.f * d.x / d.z + k.cx,
        k.f * d.y / d.z + k.cy,
    ))
}

/// Vanishing point, replacing ideal points by a point `far` pixels from the
/// optical center along the direction's image-plane component.
pub fn direction_to_vp_or_far(d: &UnitDirection, k: &CameraIntrinsics, far: f64) -> ImagePoint {
    if let Some(p) = direction_to_vp(d, k) {
        return p;
    }
    let planar = d.x.hypot(d.y);
    ImagePoint::new(k.cx + far * d.x / planar, k.cy + far * d.y / planar)
}

/// Angle between the lines spanned by two directions, in `[0, pi/2]`.
/// Equal to `acos |a.b|`, evaluated as `atan2(|a x b|, |a.b|)` so that
/// tiny angles keep full precision.
pub fn angular_distance(a: &UnitDirection, b: &UnitDirection) -> f64 {
    angular_distance_raw(a.to_array(), b.to_array())
}

/// [`angular_distance`] on raw (not necessarily canonical) unit vectors.
pub fn angular_distance_raw(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs();
    sin.atan2(cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(64.0, 63.5, 63.5).unwrap()
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn principal_point_is_optical_axis() {
        let k = k();
        let d = vp_to_direction(ImagePoint::new(k.cx, k.cy), &k);
        assert_eq!(d.to_array(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn forty_five_degree_rays() {
        let k = k();
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let d = vp_to_direction(ImagePoint::new(k.cx + k.f, k.cy), &k);
        assert!(close(d.to_array(), [s2, 0.0, s2], 1e-12));

        let s3 = 1.0 / 3f64.sqrt();
        let d = vp_to_direction(ImagePoint::new(k.cx - k.f, k.cy - k.f), &k);
        assert!(close(d.to_array(), [-s3, -s3, s3], 1e-12));
    }

    #[test]
    fn ideal_points_have_no_image() {
        let k = k();
        let axis = UnitDirection::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(direction_to_vp(&axis, &k), Some(ImagePoint::new(k.cx, k.cy)));
        let x = UnitDirection::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(direction_to_vp(&x, &k), None);
    }

    #[test]
    fn far_point_follows_ideal_direction() {
        let k = k();
        let d = UnitDirection::new(0.0, -1.0, 0.0).unwrap();
        // Canonical sign flips y to +1.
        assert_eq!(d.y(), 1.0);
        let p = direction_to_vp_or_far(&d, &k, 1e6);
        assert!((p.u - k.cx).abs() < 1e-9);
        assert!((p.v - (k.cy + 1e6)).abs() < 1e-6);
    }

    #[test]
    fn angular_distance_examples() {
        let z = UnitDirection::new(0.0, 0.0, 1.0).unwrap();
        let x = UnitDirection::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(angular_distance(&z, &z), 0.0);
        assert!((angular_distance(&z, &x) - FRAC_PI_2).abs() < 1e-15);
        let raw = [0.3, -0.4, 0.5f64];
        let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
        let a = raw.map(|v| v / n);
        let b = a.map(|v| -v);
        assert!(angular_distance_raw(a, b) < 1e-7);
    }

    #[test]
    fn canonical_sign_rules() {
        let d = UnitDirection::new(-1.0, 2.0, 0.0).unwrap();
        assert!(d.x() > 0.0 && d.y() < 0.0 && d.z() == 0.0);
        let d = UnitDirection::new(0.0, -3.0, 0.0).unwrap();
        assert_eq!(d.to_array(), [0.0, 1.0, 0.0]);
        assert!(d.to_array().iter().all(|v| !v.is_sign_negative()));
        assert!(UnitDirection::new(0.0, 0.0, 0.0).is_none());
        assert!(UnitDirection::new(f64::NAN, 0.0, 1.0).is_none());
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, f64::INFINITY, 1.0).is_err());
        let k = CameraIntrinsics::for_image(128, 128, None).unwrap();
        assert_eq!((k.f, k.cx, k.cy), (64.0, 63.5, 63.5));
    }

    #[test]
    fn distance_grows_along_rays_from_center() {
        let k = k();
        let axis = vp_to_direction(ImagePoint::new(k.cx, k.cy), &k);
        for angle in [0.0f64, 0.7, 2.1, 4.0] {
            let mut last = -1.0;
            for step in 0..200 {
                let r = step as f64 * 5.0;
                let p = ImagePoint::new(k.cx + r * angle.cos(), k.cy + r * angle.sin());
                let a = angular_distance(&axis, &vp_to_direction(p, &k));
                assert!(a > last || (step == 0 && a == 0.0));
                last = a;
            }
        }
    }

    proptest! {
        #[test]
        fn vp_round_trip(u in -1e4f64..1e4, v in -1e4f64..1e4) {
            let k = k();
            let d = vp_to_direction(ImagePoint::new(u, v), &k);
            let p = direction_to_vp(&d, &k).unwrap();
            prop_assert!((p.u - u).abs() < 1e-7 * (1.0 + u.abs()));
            prop_assert!((p.v - v).abs() < 1e-7 * (1.0 + v.abs()));
        }

        #[test]
        fn direction_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 1e-3f64..1.0) {
            let k = k();
            let d = UnitDirection::new(x, y, z).unwrap();
            let back = vp_to_direction(direction_to_vp(&d, &k).unwrap(), &k);
            prop_assert!(close(back.to_array(), d.to_array(), 1e-9));
        }

        #[test]
        fn metric_properties(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let (Some(da), Some(db)) = (UnitDirection::from_array(a), UnitDirection::from_array(b)) else {
                return Ok(());
            };
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let ra = a.map(|v| v / n);
            let neg = ra.map(|v| -v);
            let dist = angular_distance(&da, &db);
            prop_assert!((0.0..=FRAC_PI_2).contains(&dist));
            prop_assert_eq!(dist, angular_distance(&db, &da));
            prop_assert!((angular_distance_raw(neg, db.to_array()) - dist).abs() < 1e-7);
            prop_assert!((da.x().powi(2) + da.y().powi(2) + da.z().powi(2) - 1.0).abs() < 1e-9);
        }
    }
}
