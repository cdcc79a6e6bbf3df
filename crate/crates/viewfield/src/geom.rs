//! Rigid-body poses, camera rays, and the spherical contracted
//! coordinate parameterization.
//!
//! Optical convention: +z forward, +x right, +y down. Poses are
//! camera-to-world.

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform in SE(3), stored as unit quaternion + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Composition: `self * other` applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Serialization order used by the stream format: [tx,ty,tz,qx,qy,qz,qw].
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ]
    }

    pub fn from_array(a: &[f64; 7]) -> Pose {
        Pose {
            // Stored quaternions are already unit; skipping normalization
            // keeps serialize/deserialize round trips bit-exact.
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(a[6], a[3], a[4], a[5])),
            translation: Vector3::new(a[0], a[1], a[2]),
        }
    }
}

/// Euclidean distance between translation components.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Ray in a model's local frame; direction is unit length.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Point in the contracted spherical coordinate cube [0,1]^3.
///
/// `theta` is azimuth (periodic axis), `phi` elevation, `rho` the
/// contracted radius 1/(1+r).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractedPoint {
    pub theta: f64,
    pub phi: f64,
    pub rho: f64,
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument("focal lengths must be > 0".into()));
        }
        if self.cx < 0.0
            || self.cx >= self.width as f64
            || self.cy < 0.0
            || self.cy >= self.height as f64
        {
            return Err(Error::InvalidArgument(
                "principal point outside image".into(),
            ));
        }
        Ok(())
    }
}

/// Map a model-local Cartesian point into the contracted cube.
///
/// r = |p|, rho = 1/(1+r), theta = (atan2(z,x)+pi)/(2pi),
/// phi = (asin(y/r)+pi/2)/pi. At the origin and at the poles (|y| = r)
/// the azimuth is fixed to 0.5 so the map is total.
pub fn to_contracted(p: &Vector3<f64>) -> Result<ContractedPoint> {
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(Error::Domain("non-finite input point".into()));
    }
    let r = p.norm();
    let rho = 1.0 / (1.0 + r);
    if r == 0.0 {
        return Ok(ContractedPoint {
            theta: 0.5,
            phi: 0.5,
            rho: 1.0,
        });
    }
    let sin_phi = (p.y / r).clamp(-1.0, 1.0);
    let phi = (sin_phi.asin() + PI / 2.0) / PI;
    let horiz_sq = p.x * p.x + p.z * p.z;
    let theta = if horiz_sq == 0.0 {
        // pole convention
        0.5
    } else {
        (p.z.atan2(p.x) + PI) / (2.0 * PI)
    };
    Ok(ContractedPoint { theta, phi, rho })
}

/// Inverse of [`to_contracted`], away from the poles and origin.
pub fn from_contracted(c: &ContractedPoint) -> Result<Vector3<f64>> {
    if c.rho <= 0.0 {
        return Err(Error::Domain("rho = 0 is the point at infinity".into()));
    }
    let r = 1.0 / c.rho - 1.0;
    let elev = c.phi * PI - PI / 2.0;
    let y = r * elev.sin();
    let h = r * elev.cos();
    let az = c.theta * 2.0 * PI - PI;
    Ok(Vector3::new(h * az.cos(), y, h * az.sin()))
}

/// Cast the ray through pixel position (u, v), expressed in the anchor
/// keyframe's local frame. (u, v) are sample positions on the image
/// plane; pixel i samples at i + 0.5.
pub fn pixel_to_ray(
    kf_pose: &Pose,
    intr: &CameraIntrinsics,
    u: f64,
    v: f64,
    model_anchor: &Pose,
) -> Ray {
    let dir_cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let origin_world = kf_pose.translation;
    let dir_world = kf_pose.rotation * dir_cam;
    let anchor_inv = model_anchor.inverse();
    let origin = anchor_inv.transform_point(&origin_world);
    let direction = (anchor_inv.rotation * dir_world).normalize();
    Ray { origin, direction }
}
