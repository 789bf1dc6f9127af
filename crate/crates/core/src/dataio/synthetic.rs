//! Procedural multi-view dynamic scenes made of fronto-parallel textured
//! planes, with an exact renderer.
//!
//! The world frame is the reference camera's frame. Each primitive lives on
//! the plane `z = depth`; its shape and texture are defined in local plane
//! coordinates that translate over time along an affine path.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{frame_file_name, CameraEntry, DatasetManifest, FrameEntry, MANIFEST_SCHEMA_VERSION};
use crate::error::{ensure, Error, Result};
use crate::geometry::{make_planes, pixel_ray, plane_point, Camera, PlaneSet};
use crate::imaging::FloatImage;
use crate::mpi::MpiVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant {
        rgb: [f64; 3],
    },
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        /// Side of one square in world units.
        period: f64,
    },
    Sinusoid {
        base: [f64; 3],
        amplitude: [f64; 3],
        /// Cycles per world unit along x and y.
        frequency: [f64; 2],
        #[serde(default)]
        phase: f64,
    },
    /// Bilinearly interpolated value noise on a square lattice.
    Noise {
        base: [f64; 3],
        amplitude: f64,
        /// Lattice spacing in world units.
        cell: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Texture {
    pub fn color(&self, p: [f64; 2], scene_seed: u64) -> [f64; 3] {
        let c = match self {
            Texture::Constant { rgb } => *rgb,
            Texture::Checker { a, b, period } => {
                let i = (p[0] / period).floor() as i64 + (p[1] / period).floor() as i64;
                if i.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Sinusoid {
                base,
                amplitude,
                frequency,
                phase,
            } => {
                let tau = std::f64::consts::TAU;
                let s = (tau * (frequency[0] * p[0] + frequency[1] * p[1]) + phase).sin();
                [0, 1, 2].map(|k| base[k] + amplitude[k] * s)
            }
            Texture::Noise {
                base,
                amplitude,
                cell,
                seed,
            } => {
                let (x, y) = (p[0] / cell, p[1] / cell);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (i, j) = (x0 as i64, y0 as i64);
                let s = scene_seed ^ seed.rotate_left(32);
                [0, 1, 2].map(|k| {
                    let v = |a: i64, b: i64| lattice_value(s, a, b, k as u64);
                    let n = (1.0 - fx) * (1.0 - fy) * v(i, j)
                        + fx * (1.0 - fy) * v(i + 1, j)
                        + (1.0 - fx) * fy * v(i, j + 1)
                        + fx * fy * v(i + 1, j + 1);
                    base[k] + amplitude * n
                })
            }
        };
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Deterministic value in `[-1, 1]` for a lattice point (splitmix64 finalizer).
fn lattice_value(seed: u64, i: i64, j: i64, channel: u64) -> f64 {
    let mut z = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ channel.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Covers the whole plane.
    Full,
    Rect {
        center: [f64; 2],
        half_size: [f64; 2],
        /// Width of the logistic edge ramp in world units; 0 is a hard edge.
        #[serde(default)]
        softness: f64,
    },
    Disc {
        center: [f64; 2],
        radius: f64,
        #[serde(default)]
        softness: f64,
    },
}

fn edge(inside: f64, softness: f64) -> f64 {
    if softness > 0.0 {
        1.0 / (1.0 + (-inside / softness).exp())
    } else if inside >= 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Shape {
    pub fn coverage(&self, p: [f64; 2]) -> f64 {
        match self {
            Shape::Full => 1.0,
            Shape::Rect {
                center,
                half_size,
                softness,
            } => {
                edge(half_size[0] - (p[0] - center[0]).abs(), *softness)
                    * edge(half_size[1] - (p[1] - center[1]).abs(), *softness)
            }
            Shape::Disc {
                center,
                radius,
                softness,
            } => edge(radius - (p[0] - center[0]).hypot(p[1] - center[1]), *softness),
        }
    }

    fn center(&self) -> Option<[f64; 2]> {
        match self {
            Shape::Full => None,
            Shape::Rect { center, .. } | Shape::Disc { center, .. } => Some(*center),
        }
    }
}

/// Affine path: the local frame is offset by `start + velocity * (t - 1)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Motion {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

impl Motion {
    pub fn offset(&self, t: usize) -> [f64; 2] {
        let s = t as f64 - 1.0;
        [self.start[0] + self.velocity[0] * s, self.start[1] + self.velocity[1] * s]
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub depth: f64,
    pub shape: Shape,
    pub texture: Texture,
    #[serde(default = "one")]
    pub opacity: f64,
    #[serde(default)]
    pub motion: Motion,
}

impl Primitive {
    /// Straight color and alpha at world point `(x, y)` on the plane.
    pub fn sample(&self, x: f64, y: f64, t: usize, seed: u64) -> ([f64; 3], f64) {
        let o = self.motion.offset(t);
        let local = [x - o[0], y - o[1]];
        (
            self.texture.color(local, seed),
            (self.opacity * self.shape.coverage(local)).clamp(0.0, 1.0),
        )
    }
}

/// Cameras on a horizontal line with shared intrinsics and identity
/// orientation; camera `reference` sits at the world origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub count: usize,
    /// Spacing between neighboring cameras along x, world units.
    pub baseline: f64,
    /// Focal length in pixels.
    pub focal: f64,
    pub reference: usize,
    #[serde(default)]
    pub held_out: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub name: String,
    #[serde(rename = "T")]
    pub timestamps: usize,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub seed: u64,
    pub rig: RigSpec,
    pub primitives: Vec<Primitive>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.timestamps >= 1, Contract, "scene needs at least one timestamp");
        ensure!(self.width >= 1 && self.height >= 1, Contract, "empty image size");
        ensure!(
            self.near > 0.0 && self.near < self.far,
            Contract,
            "need 0 < near < far (near={}, far={})",
            self.near,
            self.far
        );
        let rig = &self.rig;
        ensure!(rig.count >= 1 && rig.focal > 0.0, Contract, "invalid rig {rig:?}");
        ensure!(rig.reference < rig.count, Contract, "reference camera {} out of range", rig.reference);
        for &h in &rig.held_out {
            ensure!(
                h < rig.count && h != rig.reference,
                Contract,
                "held-out camera {h} must be a non-reference camera of the rig"
            );
        }
        let cams = self.cameras()?;
        for (i, p) in self.primitives.iter().enumerate() {
            ensure!(
                p.depth >= self.near && p.depth <= self.far,
                Contract,
                "primitive {i} depth {} outside [{}, {}]",
                p.depth,
                self.near,
                self.far
            );
            if let Some(c) = p.shape.center() {
                for t in 1..=self.timestamps {
                    let o = p.motion.offset(t);
                    let w = Vector3::new(c[0] + o[0], c[1] + o[1], p.depth);
                    let seen = cams.iter().any(|cam| {
                        cam.project(&w).is_some_and(|(u, v)| {
                            u >= -0.5 && v >= -0.5 && u <= cam.width as f64 - 0.5 && v <= cam.height as f64 - 0.5
                        })
                    });
                    ensure!(seen, Contract, "primitive {i} leaves every camera's view at t={t}");
                }
            }
        }
        Ok(())
    }

    pub fn camera_id(k: usize) -> String {
        format!("cam{k:02}")
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.rig.count)
            .map(|k| {
                let x = (k as f64 - self.rig.reference as f64) * self.rig.baseline;
                Camera::looking_forward(self.rig.focal, self.width, self.height, Vector3::new(x, 0.0, 0.0))
            })
            .collect()
    }

    /// The desk-scale test scene: a noise-textured opaque backdrop, a static
    /// soft rectangle at mid depth and a soft disc sliding right, each on
    /// one of `planes` disparity-uniform planes. The disc covers the same
    /// path for any `timestamps`, so longer sequences are time-stretched.
    pub fn desk(timestamps: usize, planes: usize) -> Result<Self> {
        let (width, height, focal) = (96u32, 64u32, 100.0);
        let (near, far) = (2.0, 8.0);
        let depths = make_planes(near, far, planes)?.depths;
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        // World units per pixel on a plane of the given depth.
        let px = |depth: f64| depth / focal;
        let back = depths[0];
        let mid = depths[(planes - 1) * 3 / 7];
        let front = depths[(planes - 1) * 6 / 7];
        let travel = 24.0 * px(front);
        let steps = (timestamps.max(2) - 1) as f64;
        Ok(Self {
            name: format!("desk-t{timestamps}"),
            timestamps,
            width,
            height,
            near,
            far,
            seed: 7,
            rig: RigSpec {
                count: 5,
                baseline: 0.1,
                focal,
                reference: 2,
                held_out: vec![1],
            },
            primitives: vec![
                Primitive {
                    depth: back,
                    shape: Shape::Full,
                    texture: Texture::Noise {
                        base: [0.45, 0.5, 0.55],
                        amplitude: 0.3,
                        cell: 2.0 * px(back),
                        seed: 1,
                    },
                    opacity: 1.0,
                    motion: Motion::default(),
                },
                Primitive {
                    depth: mid,
                    shape: Shape::Rect {
                        center: [(30.0 - cx) * px(mid), (30.0 - cy) * px(mid)],
                        half_size: [14.0 * px(mid), 12.0 * px(mid)],
                        softness: 1.5 * px(mid),
                    },
                    texture: Texture::Sinusoid {
                        base: [0.8, 0.35, 0.2],
                        amplitude: [0.15, 0.1, 0.1],
                        frequency: [1.0 / (12.0 * px(mid)), 0.0],
                        phase: 0.0,
                    },
                    opacity: 1.0,
                    motion: Motion::default(),
                },
                Primitive {
                    depth: front,
                    shape: Shape::Disc {
                        center: [(48.0 - cx) * px(front), (36.0 - cy) * px(front)],
                        radius: 9.0 * px(front),
                        softness: 1.5 * px(front),
                    },
                    texture: Texture::Constant { rgb: [0.2, 0.35, 0.9] },
                    opacity: 1.0,
                    motion: Motion {
                        start: [0.0, 0.0],
                        velocity: [travel / steps, 0.0],
                    },
                },
            ],
        })
    }
}

/// Exact render of camera `camera` at 1-based `t`: every pixel-center ray is
/// intersected with each primitive plane and composited back to front over
/// black.
pub fn render_frame(spec: &SyntheticSceneSpec, camera: &Camera, t: usize) -> FloatImage {
    let mut order: Vec<&Primitive> = spec.primitives.iter().collect();
    // Far to near; among equal depths, later primitives are in front.
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut img = FloatImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let ray = pixel_ray(camera, (x as f64, y as f64), t as u32);
            let mut out = [0.0f64; 3];
            for p in &order {
                if ray.direction.z <= 0.0 {
                    continue;
                }
                let s = (p.depth - ray.origin.z) / ray.direction.z;
                if s <= 0.0 {
                    continue;
                }
                let q = ray.origin + ray.direction * s;
                let (c, a) = p.sample(q.x, q.y, t, spec.seed);
                for k in 0..3 {
                    out[k] = out[k] * (1.0 - a) + c[k] * a;
                }
            }
            let px = img.pixel_mut(x, y);
            for k in 0..3 {
                px[k] = out[k] as f32;
            }
        }
    }
    img
}

/// Renders every frame of `spec` into `dir` and writes `manifest.json`
/// (plus the spec itself as `scene.json`).
pub fn synth_scene(spec: &SyntheticSceneSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let cams = spec.cameras()?;
    let mut frames = Vec::new();
    for t in 1..=spec.timestamps {
        for (k, cam) in cams.iter().enumerate() {
            let name = frame_file_name(t, k);
            render_frame(spec, cam, t).save_png(&images.join(&name))?;
            frames.push(FrameEntry {
                t,
                camera: SyntheticSceneSpec::camera_id(k),
                path: format!("images/{name}"),
            });
        }
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        scene: spec.name.clone(),
        timestamps: spec.timestamps,
        width: spec.width,
        height: spec.height,
        near: spec.near,
        far: spec.far,
        reference: SyntheticSceneSpec::camera_id(spec.rig.reference),
        cameras: cams
            .iter()
            .enumerate()
            .map(|(k, c)| CameraEntry {
                id: SyntheticSceneSpec::camera_id(k),
                camera: c.clone().into(),
            })
            .collect(),
        held_out: spec.rig.held_out.iter().map(|&k| SyntheticSceneSpec::camera_id(k)).collect(),
        frames,
        missing: Vec::new(),
    };
    manifest.validate()?;
    manifest.save(&dir.join("manifest.json"))?;
    let scene = dir.join("scene.json");
    fs::write(&scene, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&scene, e))?;
    Ok(manifest)
}

/// An MPI whose planes hold the scene's primitives exactly. Every primitive
/// must sit on one of the planes.
pub fn synthetic_mpi(
    spec: &SyntheticSceneSpec,
    t: usize,
    planes: &PlaneSet,
    reference: &Camera,
    pad: usize,
) -> Result<MpiVolume> {
    let on_plane = |p: &Primitive| {
        planes
            .depths
            .iter()
            .position(|&d| (d - p.depth).abs() <= 1e-9 * d)
    };
    let mut per_plane: Vec<Vec<&Primitive>> = vec![Vec::new(); planes.len()];
    for (i, p) in spec.primitives.iter().enumerate() {
        let d = on_plane(p).ok_or_else(|| {
            Error::Contract(format!("primitive {i} at depth {} is not on any plane", p.depth))
        })?;
        per_plane[d].push(p);
    }
    let (w, h) = (reference.width as usize + 2 * pad, reference.height as usize + 2 * pad);
    MpiVolume::from_fn(planes.clone(), w, h, pad, t as u32, |d, x, y| {
        let depth = planes.depths[d];
        let q = plane_point(reference, (x as f64 - pad as f64, y as f64 - pad as f64), depth);
        // Over-composite same-plane primitives in straight (unpremultiplied) form.
        let mut prem = [0.0f64; 3];
        let mut alpha = 0.0f64;
        let mut last = [0.0f64; 3];
        for p in &per_plane[d] {
            let (c, a) = p.sample(q.x, q.y, t, spec.seed);
            for k in 0..3 {
                prem[k] = prem[k] * (1.0 - a) + c[k] * a;
            }
            alpha = alpha * (1.0 - a) + a;
            last = c;
        }
        let color = if alpha > 0.0 {
            prem.map(|v| v / alpha)
        } else {
            last
        };
        (color.map(|v| v.clamp(0.0, 1.0) as f32), alpha as f32)
    })
}
