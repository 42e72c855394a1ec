//! Pinhole camera model, rigid poses and ray generation.
//!
//! Camera frame: +x right, +y down, +z forward. World frame: z up, floor at z = 0.
//! Pixel (0, 0) is the top-left pixel; rays go through pixel centers.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{NeoError, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let r = &p.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = NeoError;

    fn try_from(r: PoseRepr) -> Result<Self> {
        // JSON round trips lose the last ulp, so accept slightly looser orthonormality here.
        let rotation = Matrix3::from_row_slice(&r.rotation);
        let p = Pose {
            rotation,
            translation: Vec3::from(r.translation),
        };
        p.check(1e-6)?;
        Ok(p)
    }
}

/// Base rotation mapping camera axes onto the world at zero yaw/pitch/roll:
/// camera forward is world +x, camera right is world -y, camera down is world -z.
fn level_camera_basis() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a).into_inner()
}

fn rot_z(a: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a).into_inner()
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let p = Pose {
            rotation,
            translation,
        };
        p.check(ORTHO_TOL)?;
        Ok(p)
    }

    fn check(&self, tol: f64) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(NeoError::InvalidPose("non-finite entries".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if err > tol || (det - 1.0).abs() > tol {
            return Err(NeoError::InvalidPose(format!(
                "rotation not orthonormal (|RᵀR-I|={err:.3e}, det={det})"
            )));
        }
        Ok(())
    }

    /// Camera at `position` looking along heading `yaw` (radians, counter-clockwise from
    /// world +x), tilted up by `pitch` and rolled about its optical axis by `roll`.
    pub fn from_position_ypr(position: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        Pose {
            rotation: rot_z(yaw) * level_camera_basis() * rot_x(pitch) * rot_z(roll),
            translation: position,
        }
    }

    /// Inverse of [`Pose::from_position_ypr`]: returns (yaw, pitch, roll) in radians.
    pub fn yaw_pitch_roll(&self) -> (f64, f64, f64) {
        let fwd = self.rotation.column(2);
        let pitch = fwd.z.clamp(-1.0, 1.0).asin();
        let yaw = fwd.y.atan2(fwd.x);
        let base = rot_z(yaw) * level_camera_basis() * rot_x(pitch);
        let q = base.transpose() * self.rotation;
        let roll = q[(1, 0)].atan2(q[(0, 0)]);
        (yaw, pitch, roll)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn position(&self) -> Vec3 {
        self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Apply a twist `(ωx, ωy, ωz, tx, ty, tz)`: the rotation vector is exponentiated
    /// (Rodrigues) and left-multiplied in the world frame, the translation is added in the
    /// world frame. The camera center moves only by the translation part.
    pub fn perturb(&self, twist: &[f64; 6]) -> Pose {
        let omega = Vec3::new(twist[0], twist[1], twist[2]);
        let dr = rodrigues(&omega);
        Pose {
            rotation: dr * self.rotation,
            translation: self.translation + Vec3::new(twist[3], twist[4], twist[5]),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Snap the rotation back onto SO(3) (nearest rotation via SVD).
    pub fn reorthonormalize(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Rotation angle (radians) and translation distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        (c.acos(), (self.translation - other.translation).norm())
    }
}

fn rodrigues(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    if theta < 1e-300 {
        return Matrix3::identity();
    }
    let axis = Unit::new_normalize(*omega);
    Rotation3::from_axis_angle(&axis, theta).into_inner()
}

/// Pinhole intrinsics with the principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(focal_px: f64, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics {
            focal_px,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(NeoError::InvalidIntrinsics(format!(
                "focal length must be positive, got {}",
                self.focal_px
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(NeoError::InvalidIntrinsics(format!(
                "resolution must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Horizontal and vertical field of view in degrees.
    pub fn fov_degrees(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let f = |d: usize| 2.0 * (d as f64 / (2.0 * self.focal_px)).atan().to_degrees();
        Ok((f(self.width), f(self.height)))
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    /// Grow the image plane to the requested FOV at constant focal length.
    ///
    /// Each axis must be at least as wide as now and at least one axis must grow. New
    /// dimensions are rounded to the nearest integer with the same parity as the current
    /// one, so the old image sits exactly centered.
    pub fn extend_to_fov(&self, target_fov_x: f64, target_fov_y: f64) -> Result<CameraIntrinsics> {
        let (fx, fy) = self.fov_degrees()?;
        for t in [target_fov_x, target_fov_y] {
            if !(t.is_finite() && t < 180.0) {
                return Err(NeoError::InvalidTarget(format!(
                    "target FOV {t}° must be below 180°"
                )));
            }
        }
        let grows = |cur: f64, tgt: f64| tgt > cur + 1e-9;
        let shrinks = |cur: f64, tgt: f64| tgt < cur - 1e-9;
        if shrinks(fx, target_fov_x) || shrinks(fy, target_fov_y) {
            return Err(NeoError::InvalidTarget(format!(
                "target ({target_fov_x}°, {target_fov_y}°) smaller than current ({fx}°, {fy}°)"
            )));
        }
        if !grows(fx, target_fov_x) && !grows(fy, target_fov_y) {
            return Err(NeoError::InvalidTarget(format!(
                "target ({target_fov_x}°, {target_fov_y}°) does not extend current ({fx}°, {fy}°)"
            )));
        }
        let size = |cur_dim: usize, cur_fov: f64, tgt: f64| -> usize {
            if !grows(cur_fov, tgt) {
                return cur_dim;
            }
            let exact = 2.0 * self.focal_px * (tgt.to_radians() / 2.0).tan();
            let parity = (cur_dim % 2) as f64;
            let n = ((exact - parity) / 2.0).round() * 2.0 + parity;
            (n as usize).max(cur_dim)
        };
        CameraIntrinsics::new(
            self.focal_px,
            size(self.width, fx, target_fov_x),
            size(self.height, fy, target_fov_y),
        )
    }

    /// Pixel offset of `inner` centered inside `self`; both must share the focal length.
    pub fn center_offset(&self, inner: &CameraIntrinsics) -> Result<(usize, usize)> {
        if self.focal_px != inner.focal_px {
            return Err(NeoError::InvalidArgument(format!(
                "focal mismatch: {} vs {}",
                self.focal_px, inner.focal_px
            )));
        }
        if inner.width > self.width
            || inner.height > self.height
            || (self.width - inner.width) % 2 != 0
            || (self.height - inner.height) % 2 != 0
        {
            return Err(NeoError::InvalidArgument(format!(
                "{}x{} cannot be centered in {}x{}",
                inner.width, inner.height, self.width, self.height
            )));
        }
        Ok(((self.width - inner.width) / 2, (self.height - inner.height) / 2))
    }

    /// Same FOV at a scaled resolution (focal scales with it).
    pub fn scaled(&self, width: usize, height: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            focal_px: self.focal_px * width as f64 / self.width as f64,
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Ray through continuous image coordinates `(u, v)` (pixel centers sit at `i + 0.5`).
pub fn ray_through(pose: &Pose, intr: &CameraIntrinsics, u: f64, v: f64) -> Ray {
    let d_cam = Vec3::new((u - intr.cx()) / intr.focal_px, (v - intr.cy()) / intr.focal_px, 1.0);
    Ray::new(pose.translation, pose.rotation * d_cam)
}

/// Ray through the center of pixel `(x, y)`.
pub fn ray_for_pixel(pose: &Pose, intr: &CameraIntrinsics, x: usize, y: usize) -> Result<Ray> {
    if x >= intr.width || y >= intr.height {
        return Err(NeoError::PixelOutOfBounds {
            x,
            y,
            width: intr.width,
            height: intr.height,
        });
    }
    Ok(pixel_ray(pose, intr, x, y))
}

/// Unchecked variant for hot loops; callers iterate within bounds.
#[inline]
pub(crate) fn pixel_ray(pose: &Pose, intr: &CameraIntrinsics, x: usize, y: usize) -> Ray {
    // (x + 0.5) - w/2 is exact in f64, so crops of a wider image produce identical rays.
    let dx = (x as f64 + 0.5) - intr.width as f64 / 2.0;
    let dy = (y as f64 + 0.5) - intr.height as f64 / 2.0;
    let d_cam = Vec3::new(dx / intr.focal_px, dy / intr.focal_px, 1.0);
    Ray::new(pose.translation, pose.rotation * d_cam)
}

/// Project a world point; returns continuous image coords and camera-frame depth, or
/// `None` behind the camera.
pub fn project(pose: &Pose, intr: &CameraIntrinsics, world: &Vec3) -> Option<(f64, f64, f64)> {
    let pc = pose.rotation.transpose() * (world - pose.translation);
    if pc.z <= 1e-12 {
        return None;
    }
    Some((
        intr.focal_px * pc.x / pc.z + intr.cx(),
        intr.focal_px * pc.y / pc.z + intr.cy(),
        pc.z,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr(f: f64, w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(f, w, h).unwrap()
    }

    #[test]
    fn fov_examples() {
        let (fx, fy) = intr(128.0, 256, 256).fov_degrees().unwrap();
        assert_relative_eq!(fx, 90.0, epsilon = 1e-12);
        assert_relative_eq!(fy, 90.0, epsilon = 1e-12);
        let (fx, _) = intr(128.0, 512, 512).fov_degrees().unwrap();
        assert!((fx - 126.87).abs() < 0.01, "{fx}");
        for f in [1.0, 7.5, 300.0] {
            let i = CameraIntrinsics {
                focal_px: f,
                width: (2.0 * f) as usize,
                height: 4,
            };
            if (2.0 * f).fract() == 0.0 {
                assert_relative_eq!(i.fov_degrees().unwrap().0, 90.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(-1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(10.0, 0, 10).is_err());
        let bad = CameraIntrinsics {
            focal_px: f64::NAN,
            width: 4,
            height: 4,
        };
        assert!(bad.fov_degrees().is_err());
    }

    #[test]
    fn extend_examples() {
        let big = intr(128.0, 256, 256).extend_to_fov(126.87, 126.87).unwrap();
        assert_eq!((big.width, big.height), (512, 512));
        assert_eq!(big.focal_px, 128.0);

        // 2·120·tan(63.435°) = 480.0
        let target = 2.0 * (2.0f64).atan().to_degrees();
        let big = intr(120.0, 240, 240).extend_to_fov(target, target).unwrap();
        assert_eq!(big.width, 480);

        assert!(intr(128.0, 256, 256).extend_to_fov(90.0, 90.0).is_err());
        assert!(intr(128.0, 256, 256).extend_to_fov(80.0, 120.0).is_err());
        assert!(intr(128.0, 256, 256).extend_to_fov(180.0, 120.0).is_err());
    }

    #[test]
    fn horizontal_only_extension() {
        let small = intr(100.0, 160, 240);
        let (fx, fy) = small.fov_degrees().unwrap();
        let target_x = 2.0 * (320.0f64 / 200.0).atan().to_degrees();
        assert!(target_x > fx);
        let big = small.extend_to_fov(target_x, fy).unwrap();
        assert_eq!((big.width, big.height), (320, 240));
    }

    #[test]
    fn ray_examples() {
        let i = intr(128.0, 256, 256);
        let id = Pose::identity();
        let r = ray_through(&id, &i, 128.0, 128.0);
        assert_relative_eq!(r.direction, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);

        let r = ray_through(&id, &i, 128.0 + 128.0, 128.0);
        let ang = r.direction.z.acos().to_degrees();
        assert_relative_eq!(ang, 45.0, epsilon = 1e-12);

        let r = ray_for_pixel(&id, &i, 0, 0).unwrap();
        let expect = Vec3::new(-0.99609375, -0.99609375, 1.0).normalize();
        assert_relative_eq!(r.direction, expect, epsilon = 1e-15);
        assert_relative_eq!(r.direction.norm(), 1.0, epsilon = 1e-12);

        assert!(ray_for_pixel(&id, &i, 256, 0).is_err());
        assert!(ray_for_pixel(&id, &i, 0, 256).is_err());
    }

    #[test]
    fn pose_examples() {
        let p = Pose::from_position_ypr(Vec3::new(1.0, 2.0, 1.5), 0.7, 0.1, -0.05);
        let e = p.compose(&p.inverse());
        assert_relative_eq!(*e.rotation(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(*e.translation(), Vec3::zeros(), epsilon = 1e-12);

        let t = Pose::identity().perturb(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(*t.translation(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(*t.rotation(), Matrix3::identity());

        let yaw = Pose::identity().perturb(&[0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0]);
        // Rodrigues with k = z, θ = π/2: I + K sinθ + K²(1-cosθ).
        let k = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let expect = Matrix3::identity() + k + k * k;
        assert_relative_eq!(*yaw.rotation(), expect, epsilon = 1e-15);

        assert_eq!(p.perturb(&[0.0; 6]), p);
    }

    #[test]
    fn level_camera_axes() {
        let p = Pose::from_position_ypr(Vec3::zeros(), 0.0, 0.0, 0.0);
        assert_relative_eq!(p.rotation() * Vec3::z(), Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(p.rotation() * Vec3::y(), -Vec3::z(), epsilon = 1e-15);
        let up = Pose::from_position_ypr(Vec3::zeros(), 0.0, 0.3, 0.0);
        assert!((up.rotation() * Vec3::z()).z > 0.0);
    }

    #[test]
    fn pose_validation_and_serde() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vec3::zeros()).is_err());
        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(flip, Vec3::zeros()).is_err());

        let p = Pose::from_position_ypr(Vec3::new(1.0, 2.0, 1.5), 0.7, 0.1, -0.05);
        let js = serde_json::to_value(p).unwrap();
        assert_eq!(js["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(js["translation"].as_array().unwrap().len(), 3);
        let back: Pose = serde_json::from_value(js).unwrap();
        assert_eq!(back, p);

        let i = intr(32.0, 64, 48);
        let js = serde_json::to_string(&i).unwrap();
        assert_eq!(js, r#"{"focal_px":32.0,"width":64,"height":48}"#);
    }

    #[test]
    fn reorthonormalize_repairs_drift() {
        let mut p = Pose::from_position_ypr(Vec3::new(0.0, 0.0, 1.0), 0.3, 0.2, 0.1);
        for i in 0..1000 {
            p = p.perturb(&[1e-3, -2e-3, 1.5e-3, 0.0, 0.0, 0.0]);
            if i % 7 == 0 {
                p.rotation *= 1.0 + 1e-7;
            }
        }
        let q = p.reorthonormalize();
        assert!(q.check(1e-12).is_ok());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -5.0..5.0f64,
            -3.2..3.2f64,
            -1.5..1.5f64,
            -3.2..3.2f64,
        )
            .prop_map(|(x, y, z, a, b, c)| Pose::from_position_ypr(Vec3::new(x, y, z), a, b, c))
    }

    proptest! {
        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).abs().max() < 1e-9);
            prop_assert!((l.translation - r.translation).abs().max() < 1e-9);
            let ii = a.inverse().inverse();
            prop_assert!((ii.rotation - a.rotation).abs().max() < 1e-12);
            prop_assert!((ii.translation - a.translation).abs().max() < 1e-12);
        }

        #[test]
        fn ypr_round_trip(yaw in -3.1..3.1f64, pitch in -1.4..1.4f64, roll in -3.1..3.1f64) {
            let p = Pose::from_position_ypr(Vec3::zeros(), yaw, pitch, roll);
            let (y2, p2, r2) = p.yaw_pitch_roll();
            prop_assert!((y2 - yaw).abs() < 1e-9);
            prop_assert!((p2 - pitch).abs() < 1e-9);
            prop_assert!((r2 - roll).abs() < 1e-9);
        }

        #[test]
        fn pixel_projection_round_trip(pose in arb_pose(), x in 0usize..64, y in 0usize..48, t in 0.1..50.0f64) {
            let i = CameraIntrinsics::new(40.0, 64, 48).unwrap();
            let r = ray_for_pixel(&pose, &i, x, y).unwrap();
            prop_assert!((r.direction.norm() - 1.0).abs() < 1e-9);
            let (u, v, _) = project(&pose, &i, &r.at(t)).unwrap();
            prop_assert!((u - (x as f64 + 0.5)).abs() < 1e-6);
            prop_assert!((v - (y as f64 + 0.5)).abs() < 1e-6);
        }

        #[test]
        fn extension_recovers_target_fov(f in 20.0..200.0f64, half in 10usize..100, extra in 1.0..60.0f64) {
            let small = CameraIntrinsics::new(f, 2 * half, 2 * half).unwrap();
            let (fx, _) = small.fov_degrees().unwrap();
            let target = (fx + extra).min(170.0);
            prop_assume!(target > fx + 1e-6);
            let big = small.extend_to_fov(target, target).unwrap();
            prop_assert_eq!(big.focal_px, f);
            let (gx, gy) = big.fov_degrees().unwrap();
            prop_assert_eq!(gx, gy);
            // same-parity rounding moves the edge by at most one pixel per side
            let fov = |d: f64| 2.0 * (d / (2.0 * f)).atan().to_degrees();
            let w = big.width as f64;
            prop_assert!(fov(w - 1.0) <= target + 1e-9 && target <= fov(w + 1.0) + 1e-9, "{} vs {}", gx, target);
        }

        #[test]
        fn crop_rays_are_identical(x in 0usize..32, y in 0usize..32) {
            let small = CameraIntrinsics::new(16.0, 32, 32).unwrap();
            let big = CameraIntrinsics::new(16.0, 64, 64).unwrap();
            let (ox, oy) = big.center_offset(&small).unwrap();
            let pose = Pose::from_position_ypr(Vec3::new(1.0, 1.0, 1.5), 0.4, 0.0, 0.0);
            let a = ray_for_pixel(&pose, &small, x, y).unwrap();
            let b = ray_for_pixel(&pose, &big, x + ox, y + oy).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
