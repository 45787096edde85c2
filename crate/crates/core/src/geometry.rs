//! Rigid transforms, the pinhole camera, and two-view epipolar quantities.
//!
//! Every [`Pose`] is world-from-camera: `x_world = R * x_cam + t`. Tangent
//! perturbations are ordered `[dt; dω]` and applied as
//! `(t + dt, R * Exp(dω))`, the same layout used by all residuals.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Point2 = Vector2<f64>;
pub type Point3 = Vector3<f64>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Below this relative translation norm two views carry no epipolar constraint.
pub const MIN_BASELINE: f64 = 1e-12;
const MIN_SAMPSON_DENOMINATOR: f64 = 1e-15;

/// Rigid-body transform, world-from-camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, renormalizing the rotation.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Quaternion given scalar-last, the order used by every file format.
    pub fn from_xyzw(t: [f64; 3], q: [f64; 4]) -> Self {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        Self::new(
            UnitQuaternion::new_unchecked(quat),
            Vector3::new(t[0], t[1], t[2]),
        )
    }

    /// Rotation as `[qx, qy, qz, qw]`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// Camera-frame point to world frame.
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// World-frame point to camera frame.
    pub fn inverse_transform_point(&self, p: &Point3) -> Point3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Right perturbation `(t + dt, R Exp(dω))` with `delta = [dt; dω]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dt = Vector3::new(delta[0], delta[1], delta[2]);
        let dw = Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(self.rotation * exp_so3(&dw), self.translation + dt)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        log_so3(&self.rotation).norm()
    }
}

/// `a ∘ other` associative composition as a free function.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Pose of `b` expressed in the frame of `a`: `a⁻¹ ∘ b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse().compose(b)
}

/// Rotation angle and translation distance between two poses.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let rel = relative_pose(a, b);
    (rel.rotation_angle(), (a.translation - b.translation).norm())
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // unit to rounding already: leave the bits alone so reading back a
    // written pose reproduces it exactly
    let mut q = if (q.norm_squared() - 1.0).abs() <= 1e-15 {
        q
    } else {
        UnitQuaternion::new_normalize(q.into_inner())
    };
    // canonical hemisphere keeps serialized output stable
    if q.w < 0.0 {
        q = UnitQuaternion::new_unchecked(-q.into_inner());
    }
    q
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp_so3(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*w)
}

/// Rotation vector of `q`, angle in `[0, π]`.
pub fn log_so3(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    let v = q.imag();
    let s = v.norm();
    if s < 1e-12 {
        return 2.0 * v;
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

/// Inverse right Jacobian of SO(3) evaluated at rotation vector `phi`.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Unit focal length, zero principal point; handy for algebraic checks.
    pub fn normalized() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2.0,
            height: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(Error::InvalidIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width && p.y < self.height
    }

    /// Unit bearing vector in the camera frame.
    pub fn bearing(&self, p: &Point2) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0).normalize()
    }

    fn project_camera(&self, pc: &Point3) -> Point2 {
        Point2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }
}

/// Pixel of world point `x` seen from `pose`.
pub fn project(pose: &Pose, k: &CameraIntrinsics, x: &Point3) -> Result<Point2> {
    let pc = pose.inverse_transform_point(x);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(k.project_camera(&pc))
}

/// Projection plus its Jacobian with respect to the pose tangent `[dt; dω]`.
pub fn project_with_jacobian(
    pose: &Pose,
    k: &CameraIntrinsics,
    x: &Point3,
) -> Result<(Point2, Matrix2x6)> {
    let rt = pose.rotation_matrix().transpose();
    let pc = rt * (x - pose.translation);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let iz = 1.0 / pc.z;
    let dproj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    let mut jac = Matrix2x6::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * (-rt)));
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * skew(&pc)));
    Ok((k.project_camera(&pc), jac))
}

/// World point at `depth` along the ray through pixel `p`.
pub fn unproject(pose: &Pose, k: &CameraIntrinsics, p: &Point2, depth: f64) -> Point3 {
    let pc = Vector3::new(
        (p.x - k.cx) / k.fx * depth,
        (p.y - k.cy) / k.fy * depth,
        depth,
    );
    pose.transform_point(&pc)
}

/// Reprojection error in pixels, `None` behind the camera.
pub fn reprojection_error(pose: &Pose, k: &CameraIntrinsics, x: &Point3, obs: &Point2) -> Option<f64> {
    project(pose, k, x).ok().map(|p| (p - obs).norm())
}

/// Essential matrix mapping camera-a rays to epipolar lines in camera b,
/// unnormalized (its scale is the baseline length).
pub fn essential_from_poses(pose_a: &Pose, pose_b: &Pose) -> (Matrix3<f64>, f64) {
    let b_from_a = pose_b.inverse().compose(pose_a);
    let t = b_from_a.translation;
    (skew(&t) * b_from_a.rotation_matrix(), t.norm())
}

/// Fundamental matrix `F` with `x_bᵀ F x_a = 0`, scaled to unit Frobenius norm.
pub fn fundamental_from_poses(
    pose_a: &Pose,
    pose_b: &Pose,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> Result<Matrix3<f64>> {
    let (e, baseline) = essential_from_poses(pose_a, pose_b);
    if baseline <= MIN_BASELINE {
        return Err(Error::DegenerateBaseline { norm: baseline });
    }
    let f = k_b.inverse_matrix().transpose() * e * k_a.inverse_matrix();
    Ok(f / f.norm())
}

fn homogeneous(p: &Point2) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

/// Signed first-order geometric residual; its square is the Sampson error.
pub fn sampson_residual(f: &Matrix3<f64>, x_a: &Point2, x_b: &Point2) -> Result<f64> {
    let ha = homogeneous(x_a);
    let hb = homogeneous(x_b);
    let fa = f * ha;
    let fb = f.transpose() * hb;
    let den = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if den <= MIN_SAMPSON_DENOMINATOR {
        return Err(Error::DegenerateDenominator);
    }
    Ok(hb.dot(&fa) / den.sqrt())
}

/// Sampson error in squared pixels.
pub fn sampson_error(f: &Matrix3<f64>, x_a: &Point2, x_b: &Point2) -> Result<f64> {
    sampson_residual(f, x_a, x_b).map(|r| r * r)
}

/// Tracked pixel correspondences between two frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet2D2D {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pairs: Vec<(Point2, Point2)>,
}

impl MatchSet2D2D {
    pub fn new(frame_a: usize, frame_b: usize) -> Self {
        Self {
            frame_a,
            frame_b,
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
