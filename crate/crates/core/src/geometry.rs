//! Camera-ray and plane algebra.
//!
//! Depth is measured as range along a unit back-projection ray throughout:
//! a point is `depth * ray`. Conversion to and from z-depth is only needed
//! at file boundaries.

use core::ops::{Add, AddAssign, Mul, Neg, Sub};

use alloc::format;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Reject a triple when `|cross| < COLLINEAR_TOL * |a - p1| * |a - p2|`.
pub const COLLINEAR_TOL: f64 = 1e-8;
/// Reject a ray/plane intersection when `|n . e| <= GRAZING_TOL`.
pub const GRAZING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A 3D point in camera coordinates.
pub type Point3 = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Returns `None` for zero or non-finite vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Pinhole calibration `K = [[fx, skew, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, skew };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            skew: 0.0,
        }
    }

    /// Checks `fx > 0`, `fy > 0` and that every entry is finite, which
    /// together make the upper-triangular `K` invertible.
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config(format!("non-finite intrinsics {:?}", self)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// `K^-1 (u, v, 1)^T`, not normalized.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        let y = (v - self.cy) / self.fy;
        let x = (u - self.cx - self.skew * y) / self.fx;
        Vec3::new(x, y, 1.0)
    }

    /// Perspective projection of a camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: Point3) -> [f64; 2] {
        let x = p.x / p.z;
        let y = p.y / p.z;
        [self.fx * x + self.skew * y + self.cx, self.fy * y + self.cy]
    }
}

/// Unit-length viewing ray with positive z (in front of the camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRay(Vec3);

impl UnitRay {
    /// Normalizes `v`; fails for zero, non-finite or backward-facing vectors.
    pub fn new(v: Vec3) -> Result<Self> {
        let dir = v
            .normalized()
            .ok_or_else(|| Error::Domain(format!("cannot normalize ray {:?}", v)))?;
        if dir.z <= 0.0 {
            return Err(Error::Domain(format!("ray {:?} does not face forward", v)));
        }
        Ok(Self(dir))
    }

    #[inline]
    pub fn dir(&self) -> Vec3 {
        self.0
    }
}

/// Plane `n . x = depth` with unit normal and positive plane depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParams {
    pub normal: Vec3,
    pub depth: f64,
}

impl PlaneParams {
    pub fn new(normal: Vec3, depth: f64) -> Result<Self> {
        let n = normal
            .normalized()
            .ok_or_else(|| Error::Domain(format!("invalid plane normal {:?}", normal)))?;
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::Domain(format!("plane depth must be positive, got {}", depth)));
        }
        Ok(Self { normal: n, depth })
    }

    /// Fits the plane through three points via [`plane_normal`] and [`plane_depth`].
    pub fn through(x_a: Point3, x_1: Point3, x_2: Point3) -> Result<Self> {
        let normal = plane_normal(x_a, x_1, x_2)?;
        let depth = plane_depth(normal, x_a);
        if depth > 0.0 {
            Ok(Self { normal, depth })
        } else {
            // plane passes through the camera centre
            Err(Error::DegenerateTriple)
        }
    }

    /// Signed distance of `p` from the plane.
    #[inline]
    pub fn residual(&self, p: Point3) -> f64 {
        self.normal.dot(p) - self.depth
    }
}

pub fn backproject_ray(k: &CameraIntrinsics, pixel: [f64; 2]) -> Result<UnitRay> {
    k.validate()?;
    if !(pixel[0].is_finite() && pixel[1].is_finite()) {
        return Err(Error::Domain(format!("non-finite pixel {:?}", pixel)));
    }
    Ok(UnitRay(k.unproject(pixel[0], pixel[1]).normalized().expect("z component is 1")))
}

/// Like [`backproject_ray`] but skips validation; `k` must already be valid.
#[inline]
pub(crate) fn ray_unchecked(k: &CameraIntrinsics, u: f64, v: f64) -> UnitRay {
    let w = k.unproject(u, v);
    UnitRay(w * (1.0 / w.norm()))
}

pub fn point_from_depth(depth: f64, ray: UnitRay) -> Result<Point3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::Domain(format!("depth must be positive and finite, got {}", depth)));
    }
    Ok(ray.0 * depth)
}

/// Unit normal of the plane through three points, oriented so that
/// `normal . x_a > 0`.
pub fn plane_normal(x_a: Point3, x_1: Point3, x_2: Point3) -> Result<Vec3> {
    let a = x_a - x_1;
    let b = x_a - x_2;
    let c = a.cross(b);
    let cn = c.norm();
    let scale = a.norm() * b.norm();
    if !(cn.is_finite() && scale.is_finite()) || cn < COLLINEAR_TOL * scale || cn == 0.0 {
        return Err(Error::DegenerateTriple);
    }
    let n = c * (1.0 / cn);
    Ok(if n.dot(x_a) < 0.0 { -n } else { n })
}

pub fn plane_depth(normal: Vec3, x_a: Point3) -> f64 {
    normal.dot(x_a)
}

/// Range along `ray` at which it meets `plane`.
pub fn ray_plane_depth(plane: &PlaneParams, ray: UnitRay) -> Result<f64> {
    let cos = plane.normal.dot(ray.0);
    if cos.abs() <= GRAZING_TOL {
        return Err(Error::GrazingRay);
    }
    let lambda = plane.depth / cos;
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::BehindCamera);
    }
    Ok(lambda)
}

pub fn range_to_zdepth(range: f64, ray: UnitRay) -> Result<f64> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::Domain(format!("range must be positive, got {}", range)));
    }
    Ok(range * ray.0.z)
}

pub fn zdepth_to_range(z: f64, ray: UnitRay) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("z-depth must be positive, got {}", z)));
    }
    Ok(z / ray.0.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn backproject_examples() {
        let id = CameraIntrinsics::identity();
        let r = backproject_ray(&id, [0.0, 0.0]).unwrap();
        assert_eq!(r.dir(), Vec3::new(0.0, 0.0, 1.0));

        let k = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0).unwrap();
        let r = backproject_ray(&k, [2.0, 2.0]).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!(close(r.dir(), Vec3::new(s, s, s), 1e-15));

        let r = backproject_ray(&id, [3.0, 4.0]).unwrap();
        let s = 1.0 / 26f64.sqrt();
        assert!(close(r.dir(), Vec3::new(3.0 * s, 4.0 * s, s), 1e-15));
    }

    #[test]
    fn non_invertible_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        let bad = CameraIntrinsics { fy: -1.0, ..CameraIntrinsics::identity() };
        assert!(matches!(backproject_ray(&bad, [0.0, 0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn point_from_depth_examples() {
        let z = UnitRay::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(point_from_depth(1.0, z).unwrap(), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(point_from_depth(2.5, z).unwrap(), Vec3::new(0.0, 0.0, 2.5));
        let r = UnitRay::new(Vec3::new(0.6, 0.0, 0.8)).unwrap();
        assert!(close(point_from_depth(2.0, r).unwrap(), Vec3::new(1.2, 0.0, 1.6), 1e-15));
        assert!(point_from_depth(0.0, z).is_err());
        assert!(point_from_depth(-1.0, z).is_err());
    }

    #[test]
    fn plane_normal_examples() {
        let n = plane_normal(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
        )
        .unwrap();
        assert!(close(n, Vec3::new(0.0, 0.0, 1.0), 1e-15));

        let r = plane_normal(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, 1.0 + 1e-15),
            Vec3::new(0.0, 0.0, 1.0),
        );
        assert_eq!(r, Err(Error::DegenerateTriple));

        let (a, p1, p2) = (
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
            Vec3::new(0.0, 0.0, 2.0),
        );
        let n = plane_normal(a, p1, p2).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-12);
        assert!(n.dot(a - p1).abs() < 1e-10);
        assert!(n.dot(a - p2).abs() < 1e-10);
        assert!(n.dot(a) > 0.0);
    }

    #[test]
    fn plane_depth_examples() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(plane_depth(n, Vec3::new(0.0, 0.0, 2.0)), 2.0);
        assert_eq!(plane_depth(n, Vec3::new(5.0, 7.0, 2.0)), 2.0);
        let s = 1.0 / 3f64.sqrt();
        let d = plane_depth(Vec3::new(s, s, s), Vec3::new(1.0, 1.0, 1.0));
        assert!((d - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ray_plane_examples() {
        let plane = PlaneParams::new(Vec3::new(0.0, 0.0, 1.0), 2.0).unwrap();
        let r0 = UnitRay::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(ray_plane_depth(&plane, r0).unwrap(), 2.0);
        let r45 = UnitRay::new(Vec3::new(1.0, 0.0, 1.0)).unwrap();
        assert!((ray_plane_depth(&plane, r45).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        // a z=0 direction is not a valid forward ray, build it directly
        let parallel = UnitRay(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(ray_plane_depth(&plane, parallel), Err(Error::GrazingRay));
        let flipped = PlaneParams { normal: Vec3::new(0.0, 0.0, -1.0), depth: 2.0 };
        assert_eq!(ray_plane_depth(&flipped, r0), Err(Error::BehindCamera));
    }

    #[test]
    fn zdepth_examples() {
        let z = UnitRay::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(range_to_zdepth(2.0, z).unwrap(), 2.0);
        let r = UnitRay::new(Vec3::new(0.6, 0.0, 0.8)).unwrap();
        assert!((zdepth_to_range(1.0, r).unwrap() - 1.25).abs() < 1e-15);
        assert!(range_to_zdepth(0.0, r).is_err());
        assert!(zdepth_to_range(-2.0, r).is_err());
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, 0.5..20.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
        (50.0..1000.0f64, 50.0..1000.0f64, 0.0..640.0f64, 0.0..480.0f64, -2.0..2.0f64)
            .prop_map(|(fx, fy, cx, cy, s)| CameraIntrinsics::with_skew(fx, fy, cx, cy, s).unwrap())
    }

    proptest! {
        #[test]
        fn fitted_plane_contains_its_points(a in arb_point(), b in arb_point(), c in arb_point()) {
            if let Ok(plane) = PlaneParams::through(a, b, c) {
                prop_assert!((plane.normal.norm() - 1.0).abs() < 1e-12);
                prop_assert!(plane.normal.dot(a - b).abs() < 1e-10 * (1.0 + (a - b).norm()));
                prop_assert!(plane.normal.dot(a - c).abs() < 1e-10 * (1.0 + (a - c).norm()));
                for p in [a, b, c] {
                    prop_assert!(plane.residual(p).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn ray_plane_point_lies_on_plane(a in arb_point(), b in arb_point(), c in arb_point(),
                                         u in -1.0..1.0f64, v in -1.0..1.0f64) {
            if let Ok(plane) = PlaneParams::through(a, b, c) {
                let ray = UnitRay::new(Vec3::new(u, v, 1.0)).unwrap();
                if let Ok(lambda) = ray_plane_depth(&plane, ray) {
                    let p = point_from_depth(lambda, ray).unwrap();
                    prop_assert!(plane.residual(p).abs() < 1e-9 * (1.0 + lambda));
                }
            }
        }

        #[test]
        fn projection_round_trip(k in arb_intrinsics(), u in 0.0..640.0f64, v in 0.0..480.0f64,
                                 d in 0.1..100.0f64) {
            let e = backproject_ray(&k, [u, v]).unwrap();
            let px = k.project(point_from_depth(d, e).unwrap());
            let e2 = backproject_ray(&k, px).unwrap();
            prop_assert!(close(e.dir(), e2.dir(), 1e-10));
        }

        #[test]
        fn zdepth_round_trip(x in -2.0..2.0f64, y in -2.0..2.0f64, r in 0.01..1000.0f64) {
            let ray = UnitRay::new(Vec3::new(x, y, 1.0)).unwrap();
            let back = zdepth_to_range(range_to_zdepth(r, ray).unwrap(), ray).unwrap();
            prop_assert!((back - r).abs() <= 1e-12 * r);
        }
    }
}
