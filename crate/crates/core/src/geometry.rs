//! Pinhole cameras, fronto-parallel plane sets and the target-to-reference
//! plane warp.
//!
//! Conventions: right-handed frames, cameras look down `+z`, pixel `(0, 0)` is
//! the top-left pixel and integer coordinates are pixel centers. Poses are
//! world-to-camera: `x_cam = R * x_world + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Wire form of a camera: `R` row-major, `t` the world-to-camera translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub R: [f64; 9],
    pub t: [f64; 3],
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        Camera::new(
            j.fx,
            j.fy,
            j.cx,
            j.cy,
            j.width,
            j.height,
            Matrix3::from_row_slice(&j.R),
            Vector3::from(j.t),
        )
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            R: [
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
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        ensure!(
            fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite(),
            Contract,
            "focal lengths must be positive (fx={fx}, fy={fy})"
        );
        ensure!(width >= 1 && height >= 1, Contract, "image must be at least 1x1");
        ensure!(
            cx.is_finite() && cy.is_finite() && translation.iter().all(|v| v.is_finite()),
            Contract,
            "camera parameters must be finite"
        );
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        ensure!(
            gram.abs().max() <= ORTHONORMAL_TOL && (rotation.determinant() - 1.0).abs() <= ORTHONORMAL_TOL,
            Contract,
            "rotation must be orthonormal with determinant +1"
        );
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Identity-rotation camera centered at `center` (world coordinates).
    pub fn looking_forward(
        focal: f64,
        width: u32,
        height: u32,
        center: Vector3<f64>,
    ) -> Result<Self> {
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            Matrix3::identity(),
            -center,
        )
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
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

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects a camera-frame point; `None` when it is not in front.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64)> {
        self.project_camera(&self.world_to_camera(world))
    }

    /// Unnormalized camera-frame direction through pixel `(u, v)` with z = 1.
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Ordered depths of the MPI planes in the reference camera frame. Index 0
/// (plane 1) is the farthest; the last index is nearest to the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSet {
    pub reference: String,
    pub near: f64,
    pub far: f64,
    pub depths: Vec<f64>,
}

impl PlaneSet {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn with_reference(mut self, reference: impl Into<String>) -> Self {
        self.reference = reference.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.depths.is_empty(), Contract, "plane set is empty");
        ensure!(
            self.near > 0.0 && self.near <= self.far,
            Contract,
            "invalid depth bounds near={} far={}",
            self.near,
            self.far
        );
        for (i, &d) in self.depths.iter().enumerate() {
            ensure!(
                d >= self.near * (1.0 - 1e-12) && d <= self.far * (1.0 + 1e-12),
                Contract,
                "plane {} depth {d} outside [{}, {}]",
                i + 1,
                self.near,
                self.far
            );
            if i > 0 {
                ensure!(
                    d < self.depths[i - 1],
                    Contract,
                    "plane depths must strictly decrease with index"
                );
            }
        }
        Ok(())
    }
}

/// `count` planes spaced uniformly in disparity, far to near.
pub fn make_planes(near: f64, far: f64, count: usize) -> Result<PlaneSet> {
    ensure!(
        near > 0.0 && near < far && far.is_finite(),
        Contract,
        "need 0 < near < far (near={near}, far={far})"
    );
    ensure!(count >= 2, Contract, "need at least two planes, got {count}");
    let (d_far, d_near) = (1.0 / far, 1.0 / near);
    let depths = (0..count)
        .map(|i| {
            if i == 0 {
                far
            } else if i + 1 == count {
                near
            } else {
                let s = i as f64 / (count - 1) as f64;
                1.0 / (d_far + s * (d_near - d_far))
            }
        })
        .collect();
    Ok(PlaneSet {
        reference: String::new(),
        near,
        far,
        depths,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction in world coordinates.
    pub direction: Vector3<f64>,
    pub pixel: (f64, f64),
    pub camera: usize,
    pub t: u32,
}

pub fn pixel_ray(camera: &Camera, pixel: (f64, f64), t: u32) -> Ray {
    pixel_ray_from(camera, 0, pixel, t)
}

pub fn pixel_ray_from(camera: &Camera, camera_index: usize, pixel: (f64, f64), t: u32) -> Ray {
    let dir_cam = camera.backproject(pixel.0, pixel.1);
    let direction = (camera.rotation.transpose() * dir_cam).normalize();
    Ray {
        origin: camera.center(),
        direction,
        pixel,
        camera: camera_index,
        t,
    }
}

/// Reference-image coordinates of the point where `ray` meets the plane
/// `z_ref = depth`. `None` when the intersection is not in front of both the
/// target camera and the reference camera.
pub fn ray_plane_sample(ray: &Ray, reference: &Camera, depth: f64) -> Option<(f64, f64)> {
    let o = reference.world_to_camera(&ray.origin);
    let d = reference.rotation * ray.direction;
    RefRay { origin: o, dir: d }.sample(reference, depth)
}

/// A ray expressed in the reference camera frame; cheap to intersect with
/// many planes.
#[derive(Clone, Copy, Debug)]
pub struct RefRay {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl RefRay {
    pub fn new(ray: &Ray, reference: &Camera) -> Self {
        Self {
            origin: reference.world_to_camera(&ray.origin),
            dir: reference.rotation * ray.direction,
        }
    }

    #[inline]
    pub fn sample(&self, reference: &Camera, depth: f64) -> Option<(f64, f64)> {
        if depth <= 0.0 || self.dir.z == 0.0 {
            return None;
        }
        let s = (depth - self.origin.z) / self.dir.z;
        if !(s > 0.0) {
            return None;
        }
        let x = self.origin.x + s * self.dir.x;
        let y = self.origin.y + s * self.dir.y;
        Some((reference.fx * x / depth + reference.cx, reference.fy * y / depth + reference.cy))
    }
}

/// Plane-induced homography mapping homogeneous target pixels to homogeneous
/// reference pixels for the plane `z_ref = depth`.
pub fn homography_matrix(reference: &Camera, target: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    reference_to_target_homography(reference, target, depth)?
        .try_inverse()
        .ok_or_else(|| Error::Contract("plane passes through the target camera center".into()))
}

/// The inverse map of [`homography_matrix`]: reference pixels on the plane
/// `z_ref = depth` to target pixels.
pub fn reference_to_target_homography(reference: &Camera, target: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    ensure!(depth > 0.0, Contract, "plane depth must be positive, got {depth}");
    // For points on the plane n^T x_ref = d: x_tgt = (R + t n^T / d) x_ref.
    let r = target.rotation * reference.rotation.transpose();
    let t = target.translation - r * reference.translation;
    let n = Vector3::new(0.0, 0.0, 1.0);
    Ok(target.intrinsics() * (r + t * n.transpose() / depth) * reference.intrinsics_inverse())
}

/// World point on the plane `z_ref = depth` seen at reference pixel `(u, v)`.
pub fn plane_point(reference: &Camera, pixel: (f64, f64), depth: f64) -> Vector3<f64> {
    let p_ref = reference.backproject(pixel.0, pixel.1) * depth;
    reference.rotation.transpose() * (p_ref - reference.translation)
}

/// Applies a homography to a pixel; `None` at the line at infinity.
pub fn apply_homography(h: &Matrix3<f64>, pixel: (f64, f64)) -> Option<(f64, f64)> {
    let p = h * Vector3::new(pixel.0, pixel.1, 1.0);
    if p.z.abs() < f64::EPSILON {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}
