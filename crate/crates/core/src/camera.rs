//! Pinhole intrinsics, rigid-body poses and the projection primitives.
//!
//! Image coordinates follow the raster convention: `u` runs along the width,
//! `v` along the height, and integer coordinates sit at pixel centers with
//! the origin at the top-left pixel. A pixel `(i, j)` covers
//! `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on quaternion norm for poses built from raw components.
pub const UNIT_QUATERNION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
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

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) || !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The 3x3 calibration matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics of the same camera resampled to a `width x height` raster.
    pub fn scaled_to(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )
    }

    /// Nearest pixel for continuous image coordinates, if inside the raster.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let iu = (u + 0.5).floor();
        let iv = (v + 0.5).floor();
        if iu < 0.0 || iv < 0.0 || iu >= self.width as f64 || iv >= self.height as f64 {
            return None;
        }
        Some((iu as usize, iv as usize))
    }
}

/// Image location with the camera-frame depth of the point that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64, depth: f64) -> Self {
        Self { u, v, depth }
    }
}

/// Which pair of frames a [`Pose`] maps between.
///
/// `Relative` is frame-agnostic (the identity, or a motion meant to be
/// applied in whatever frame it is composed with).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Convention {
    CameraFromWorld,
    WorldFromCamera,
    CameraFromCamera,
    WorldFromWorld,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    World,
    Camera,
}

impl Convention {
    fn frames(self) -> Option<(Frame, Frame)> {
        use Convention::*;
        match self {
            CameraFromWorld => Some((Frame::Camera, Frame::World)),
            WorldFromCamera => Some((Frame::World, Frame::Camera)),
            CameraFromCamera => Some((Frame::Camera, Frame::Camera)),
            WorldFromWorld => Some((Frame::World, Frame::World)),
            Relative => None,
        }
    }

    fn from_frames(target: Frame, source: Frame) -> Self {
        match (target, source) {
            (Frame::Camera, Frame::World) => Convention::CameraFromWorld,
            (Frame::World, Frame::Camera) => Convention::WorldFromCamera,
            (Frame::Camera, Frame::Camera) => Convention::CameraFromCamera,
            (Frame::World, Frame::World) => Convention::WorldFromWorld,
        }
    }

    pub fn inverse(self) -> Self {
        match self.frames() {
            Some((target, source)) => Self::from_frames(source, target),
            None => Convention::Relative,
        }
    }

    /// Convention of `a * b`, or `None` when the frames do not chain.
    pub fn chain(a: Self, b: Self) -> Option<Self> {
        match (a.frames(), b.frames()) {
            (None, _) => Some(b),
            (_, None) => Some(a),
            (Some((ta, sa)), Some((tb, sb))) => (sa == tb).then(|| Self::from_frames(ta, sb)),
        }
    }
}

/// Rigid transform `x -> R x + t` with a frame-convention tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub convention: Convention,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            convention: Convention::Relative,
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, convention: Convention) -> Self {
        Self {
            rotation,
            translation,
            convention,
        }
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)`, rejecting
    /// quaternions whose norm deviates from one by more than `tolerance`.
    pub fn from_components(
        quat_wxyz: [f64; 4],
        translation: [f64; 3],
        convention: Convention,
        tolerance: f64,
    ) -> Result<Self> {
        let q = Quaternion::new(quat_wxyz[0], quat_wxyz[1], quat_wxyz[2], quat_wxyz[3]);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > tolerance {
            return Err(Error::NonUnitQuaternion(norm));
        }
        Ok(Self::new(
            UnitQuaternion::new_normalize(q),
            Vector3::from(translation),
            convention,
        ))
    }

    /// Camera-from-world pose for a camera at `eye` looking at `target`, with
    /// the image `v` axis pointing along `-up`.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::DegenerateGeometry("look_at target coincides with eye".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::DegenerateGeometry("look_at up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the camera-from-world rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * eye.coords);
        Ok(Self::new(rotation, translation, Convention::CameraFromWorld))
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -(rotation * self.translation),
            convention: self.convention.inverse(),
        }
    }

    /// `self * other`: applies `other` first. Rotation is renormalized.
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        let convention = Convention::chain(self.convention, other.convention)
            .ok_or(Error::ConventionMismatch(self.convention, other.convention))?;
        let q = self.rotation * other.rotation;
        Ok(Pose {
            rotation: UnitQuaternion::new_normalize(q.into_inner()),
            translation: self.rotation * other.translation + self.translation,
            convention,
        })
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Returns the pose as a camera-from-world transform.
    pub fn to_camera_from_world(&self) -> Result<Pose> {
        match self.convention {
            Convention::CameraFromWorld => Ok(*self),
            Convention::WorldFromCamera => Ok(self.inverse()),
            other => Err(Error::ConventionMismatch(Convention::CameraFromWorld, other)),
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let iso = nalgebra::Isometry3::from_parts(Translation3::from(self.translation), self.rotation);
        iso.to_homogeneous()
    }

    /// Rotation angle and translation distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (self.rotation.angle_to(&other.rotation), (self.translation - other.translation).norm())
    }

    /// Geometric equality within `tol` radians and meters; conventions are not compared.
    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        let (angle, dist) = self.distance(other);
        angle <= tol && dist <= tol
    }

    /// Interpolates rotation by slerp and translation linearly.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        Pose {
            rotation: self.rotation.slerp(&other.rotation, t),
            translation: self.translation.lerp(&other.translation, t),
            convention: self.convention,
        }
    }
}

/// Projects a world point through a camera-from-world pose.
///
/// Returns `None` when the point is behind the camera or lands outside the
/// raster.
pub fn project(k: &Intrinsics, camera_from_world: &Pose, p: &Point3<f64>) -> Option<PixelCoord> {
    let pc = camera_from_world.transform_point(p);
    project_camera_point(k, &pc)
}

/// Projects a point already expressed in the camera frame.
pub fn project_camera_point(k: &Intrinsics, pc: &Point3<f64>) -> Option<PixelCoord> {
    if !(pc.z > 0.0) {
        return None;
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    k.pixel_of(u, v)?;
    Some(PixelCoord::new(u, v, pc.z))
}

/// Back-projects image coordinates at camera-frame depth `depth`.
pub fn unproject(k: &Intrinsics, u: f64, v: f64, depth: f64) -> Result<Point3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(unproject_unchecked(k, u, v, depth))
}

#[inline]
pub(crate) fn unproject_unchecked(k: &Intrinsics, u: f64, v: f64, depth: f64) -> Point3<f64> {
    Point3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth)
}
