//! Pinhole cameras, relative poses and the epipolar quantities built on them.
//!
//! Conventions: a [`Pose`] maps points from camera A's frame into camera B's
//! frame, `X_b = R * X_a + t`. The matching essential matrix is `E = [t]x R`
//! and satisfies `x_b^T E x_a = 0` for normalized image coordinates.

mod scene;

pub use scene::{jitter, synth_scene, SceneConfig, ScenePair};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("translation has zero length, essential matrix undefined")]
    ZeroBaseline,
    #[error("both epipolar lines are degenerate")]
    DegenerateEpiline,
    #[error("translation direction undefined for a zero-length translation")]
    UndefinedTranslationError,
    #[error("invalid intrinsics: focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("rotation matrix is not orthonormal with determinant 1")]
    InvalidRotation,
    #[error("need ≥ 8 co-visible points, got {0}")]
    TooFewPoints(usize),
    #[error("could not satisfy visibility constraints after {0} attempts")]
    InfeasibleScene(usize),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite() {
            Ok(())
        } else {
            Err(GeomError::InvalidIntrinsics {
                fx: self.fx,
                fy: self.fy,
            })
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        normalize_pixel(p, self)
    }

    pub fn denormalize(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(n.x * self.fx + self.cx, n.y * self.fy + self.cy)
    }
}

/// Rigid transform from camera A to camera B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks `R^T R = I` and `det R = 1` to 1e-9.
    pub fn validate(&self) -> Result<(), GeomError> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if r.iter().all(|v| v.is_finite())
            && orth <= 1e-9
            && (det - 1.0).abs() <= 1e-9
            && self.translation.iter().all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(GeomError::InvalidRotation)
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeomError> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vector3::from(translation),
        )
    }
}

/// JSON form of a pose: row-major rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            rotation: p.rotation_row_major(),
            translation: p.translation.into(),
        }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = GeomError;

    fn try_from(r: PoseRecord) -> Result<Self, GeomError> {
        Pose::from_row_major(r.rotation, r.translation)
    }
}

/// Essential matrix, defined up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    /// Algebraic residual `x_b^T E x_a` for normalized coordinates.
    pub fn residual(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        b.push(1.0).dot(&(self.0 * a.push(1.0)))
    }

    /// Copy scaled to unit Frobenius norm.
    pub fn normalized(&self) -> Self {
        Self(self.0 / self.0.norm())
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole projection of each point after applying `pose`. Returns the pixel
/// and the camera-frame depth; points behind the camera get negative depth.
pub fn project(
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
    pose: &Pose,
) -> Vec<(Vector2<f64>, f64)> {
    points
        .iter()
        .map(|p| {
            let c = pose.transform(p);
            let px = Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
            (px, c.z)
        })
        .collect()
}

pub fn normalize_pixel(p: &Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy)
}

/// `E = [t]x R`, unnormalized.
pub fn essential_from_pose(pose: &Pose) -> Result<EssentialMatrix, GeomError> {
    if pose.translation.norm() < 1e-12 {
        return Err(GeomError::ZeroBaseline);
    }
    Ok(EssentialMatrix(skew(&pose.translation) * pose.rotation))
}

/// Squared symmetric epipolar distance in normalized coordinates:
/// `(x_b^T E x_a)^2 * (1/|(E x_a)_12|^2 + 1/|(E^T x_b)_12|^2)`.
pub fn sym_epipolar_distance(
    pa: &Vector2<f64>,
    pb: &Vector2<f64>,
    e: &EssentialMatrix,
) -> Result<f64, GeomError> {
    let xa = pa.push(1.0);
    let xb = pb.push(1.0);
    let line_b = e.0 * xa;
    let line_a = e.0.transpose() * xb;
    let na = line_b.x * line_b.x + line_b.y * line_b.y;
    let nb = line_a.x * line_a.x + line_a.y * line_a.y;
    if na.sqrt() < 1e-15 && nb.sqrt() < 1e-15 {
        return Err(GeomError::DegenerateEpiline);
    }
    let r = xb.dot(&line_b);
    let r2 = r * r;
    if r2 == 0.0 {
        return Ok(0.0);
    }
    Ok(r2 / na + r2 / nb)
}

/// Squared Sampson distance in normalized coordinates:
/// `(x_b^T E x_a)^2 / (|(E x_a)_12|^2 + |(E^T x_b)_12|^2)`.
pub fn sampson_distance(
    pa: &Vector2<f64>,
    pb: &Vector2<f64>,
    e: &EssentialMatrix,
) -> Result<f64, GeomError> {
    let xa = pa.push(1.0);
    let xb = pb.push(1.0);
    let line_b = e.0 * xa;
    let line_a = e.0.transpose() * xb;
    let denom = line_b.x * line_b.x + line_b.y * line_b.y + line_a.x * line_a.x + line_a.y * line_a.y;
    if denom.sqrt() < 1e-15 {
        return Err(GeomError::DegenerateEpiline);
    }
    let r = xb.dot(&line_b);
    Ok(r * r / denom)
}

/// Rotation angle of `R` in radians, from its symmetric and skew parts.
fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    sin.atan2(cos.clamp(-1.0, 1.0))
}

/// Unsigned angle between two translation directions, in radians, in [0, pi/2].
fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs())
}

/// Max of the rotation and (sign-invariant) translation angular errors, in degrees.
pub fn pose_error(est: &Pose, gt: &Pose) -> Result<f64, GeomError> {
    if est.translation.norm() < 1e-12 || gt.translation.norm() < 1e-12 {
        return Err(GeomError::UndefinedTranslationError);
    }
    let (r_err, t_err) = pose_error_parts(est, gt);
    Ok(r_err.max(t_err))
}

/// Rotation and translation angular errors in degrees, without the
/// zero-translation check.
pub fn pose_error_parts(est: &Pose, gt: &Pose) -> (f64, f64) {
    let dr = est.rotation * gt.rotation.transpose();
    let r_err = rotation_angle(&dr).to_degrees();
    let t_err = direction_angle(&est.translation, &gt.translation).to_degrees();
    (r_err, t_err)
}

/// Rotation by `angle` radians about `axis` (need not be unit length).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = skew(&k);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
