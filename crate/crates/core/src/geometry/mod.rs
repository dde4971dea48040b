//! Pinhole cameras, rigid poses, and the pose-estimation machinery used at
//! localization time: a three-point minimal solver, a RANSAC loop, and
//! Levenberg–Marquardt refinement. Linear triangulation lives here too; it
//! serves as the explicit reference against which learned scene coordinates
//! are compared.

mod p3p;
mod ransac;
mod refine;
mod triangulate;

pub use p3p::pnp_minimal;
pub use ransac::{ransac_pnp, RansacConfig, RansacOutcome};
pub use refine::{mean_squared_reprojection, refine_pose};
pub use triangulate::triangulate_dlt;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("minimal solver found no valid root")]
    NoSolution,
    #[error("localization failed: best hypothesis has {inliers} inliers (need 4)")]
    LocalizationFailure { inliers: usize },
    #[error("invalid intrinsics: fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
}

/// Pinhole intrinsics in pixels. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite())
            || !cx.is_finite()
            || !cy.is_finite()
        {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics for an image of `width`×`height` pixels with the given
    /// horizontal field of view, square pixels and a centered principal point.
    pub fn from_fov(width: f64, height: f64, hfov_deg: f64) -> Self {
        let f = 0.5 * width / (0.5 * hfov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width,
            cy: 0.5 * height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Ray direction (z = 1) through a pixel, in camera coordinates.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    /// Pose of a camera centered at `center` whose optical axis points at
    /// `target`. `up` is the approximate world direction of image -y.
    pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-12 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-12 {
                x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * center);
        Self::from_matrix(&r, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let inv = self.rotation.inverse();
        RigidPose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }
}

/// A point that cannot be projected because it is not in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("point is behind the camera (depth {depth})")]
pub struct Behind {
    pub depth: f64,
}

pub fn project(
    k: &CameraIntrinsics,
    pose: &RigidPose,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, Behind> {
    let pc = pose.transform(point);
    if pc.z <= 0.0 {
        return Err(Behind { depth: pc.z });
    }
    Ok(Vector2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// L1 pixel residual between an observation and the projection of `point`.
/// Points behind the camera yield `+inf`; callers are expected to screen them.
pub fn reprojection_error(
    pixel: &Vector2<f64>,
    point: &Vector3<f64>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> f64 {
    match project(k, pose, point) {
        Ok(p) => (pixel - p).abs().sum(),
        Err(_) => f64::INFINITY,
    }
}

/// Euclidean pixel residual, used for inlier tests and refinement.
pub fn reprojection_error_l2(
    pixel: &Vector2<f64>,
    point: &Vector3<f64>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> f64 {
    match project(k, pose, point) {
        Ok(p) => (pixel - p).norm(),
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>) -> Self {
        Self { pixel, point }
    }
}

/// Camera-center distance (m) and relative rotation angle (degrees).
pub fn pose_error(est: &RigidPose, gt: &RigidPose) -> (f64, f64) {
    let t_err = (est.center() - gt.center()).norm();
    let r_err = est.rotation.angle_to(&gt.rotation).to_degrees();
    (t_err, r_err)
}
