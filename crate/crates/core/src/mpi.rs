//! Explicit multi-plane images: storage, over-compositing, plane sampling and
//! novel-view rendering.
//!
//! Plane index 0 is the farthest plane and index `D - 1` the nearest, so a
//! plane is attenuated by every plane with a larger index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::{ensure, Error, Result};
use crate::geometry::{pixel_ray, Camera, CameraJson, PlaneSet, RefRay};
use crate::imaging::FloatImage;

/// Per-plane over-compositing weights `a_d * prod_{i>d} (1 - a_i)`.
pub fn transmittance_weights<R: Real>(alphas: &[R]) -> Result<Vec<R>> {
    check_unit("alpha", alphas)?;
    let mut weights = vec![R::zero(); alphas.len()];
    let mut trans = R::one();
    for d in (0..alphas.len()).rev() {
        weights[d] = alphas[d] * trans;
        trans *= R::one() - alphas[d];
    }
    Ok(weights)
}

/// Composites one ray back to front over a black background.
pub fn composite_ray<R: Real>(colors: &[[R; 3]], alphas: &[R]) -> Result<[R; 3]> {
    ensure!(
        colors.len() == alphas.len(),
        Shape,
        "{} colors for {} alphas",
        colors.len(),
        alphas.len()
    );
    check_unit("alpha", alphas)?;
    for c in colors {
        check_unit("color", c)?;
    }
    Ok(composite_unchecked(colors.iter().copied().zip(alphas.iter().copied())))
}

/// The over operator without range checks; planes are yielded far to near.
#[inline]
pub fn composite_unchecked<R: Real>(planes: impl Iterator<Item = ([R; 3], R)>) -> [R; 3] {
    let mut out = [R::zero(); 3];
    for (c, a) in planes {
        for k in 0..3 {
            out[k] = out[k] * (R::one() - a) + c[k] * a;
        }
    }
    out
}

fn check_unit<R: Real>(what: &str, xs: &[R]) -> Result<()> {
    for &x in xs {
        ensure!(
            x >= R::zero() && x <= R::one(),
            Contract,
            "{what} {x} outside [0, 1]"
        );
    }
    Ok(())
}

/// The four bilinear taps of a continuous texel coordinate on a `width x
/// height` grid as `(flat index, weight)`. Taps falling outside the grid get
/// weight zero (and index 0), which is the zero-padding rule. `None` when no
/// tap lands inside.
#[inline]
pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    if !(u > -1.0 && v > -1.0 && u < width as f64 && v < height as f64) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (slot, &(x, y, w)) in taps.iter_mut().zip(&corners) {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            *slot = (y as usize * width + x as usize, w);
        }
    }
    Some(taps)
}

/// A baked, immutable RGBA plane stack in the reference camera frame.
/// `width`/`height` are the padded plane extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MpiVolume {
    pub planes: PlaneSet,
    pub width: usize,
    pub height: usize,
    pub pad: usize,
    /// 1-based timestamp this volume was baked for (0 when static).
    pub t: u32,
    color: Vec<f32>,
    alpha: Vec<f32>,
}

impl MpiVolume {
    /// `color` is `[D][H][W][3]`, `alpha` is `[D][H][W]`, both in `[0, 1]`.
    pub fn new(
        planes: PlaneSet,
        width: usize,
        height: usize,
        pad: usize,
        t: u32,
        color: Vec<f32>,
        alpha: Vec<f32>,
    ) -> Result<Self> {
        planes.validate()?;
        let n = planes.len() * width * height;
        ensure!(width > 2 * pad && height > 2 * pad, Shape, "pad {pad} leaves no interior in {width}x{height}");
        ensure!(color.len() == 3 * n, Shape, "color volume has {} values, expected {}", color.len(), 3 * n);
        ensure!(alpha.len() == n, Shape, "alpha volume has {} values, expected {n}", alpha.len());
        check_unit("color", &color)?;
        check_unit("alpha", &alpha)?;
        Ok(Self {
            planes,
            width,
            height,
            pad,
            t,
            color,
            alpha,
        })
    }

    /// Builds a volume from a per-texel function of `(plane index, x, y)`
    /// (0-based) returning `(rgb, alpha)`.
    pub fn from_fn(
        planes: PlaneSet,
        width: usize,
        height: usize,
        pad: usize,
        t: u32,
        mut f: impl FnMut(usize, usize, usize) -> ([f32; 3], f32),
    ) -> Result<Self> {
        let n = planes.len() * width * height;
        let mut color = Vec::with_capacity(3 * n);
        let mut alpha = Vec::with_capacity(n);
        for d in 0..planes.len() {
            for y in 0..height {
                for x in 0..width {
                    let (c, a) = f(d, x, y);
                    color.extend_from_slice(&c);
                    alpha.push(a);
                }
            }
        }
        Self::new(planes, width, height, pad, t, color, alpha)
    }

    pub fn depth_count(&self) -> usize {
        self.planes.len()
    }

    pub fn color(&self) -> &[f32] {
        &self.color
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    /// Stored texel of plane `d` (0-based).
    #[inline]
    pub fn texel(&self, d: usize, x: usize, y: usize) -> ([f32; 3], f32) {
        let i = (d * self.height + y) * self.width + x;
        let c = &self.color[3 * i..3 * i + 3];
        ([c[0], c[1], c[2]], self.alpha[i])
    }

    /// Bilinear sample of plane `d` (1-based, `1..=D`) at texel coordinates
    /// `(u, v)`. Outside the padded extent the plane is transparent black.
    pub fn sample_plane(&self, d: usize, u: f64, v: f64) -> Result<([f32; 3], f32)> {
        ensure!(
            (1..=self.depth_count()).contains(&d),
            Contract,
            "plane index {d} outside [1, {}]",
            self.depth_count()
        );
        Ok(self.sample0(d - 1, u, v))
    }

    #[inline]
    fn sample0(&self, d: usize, u: f64, v: f64) -> ([f32; 3], f32) {
        let Some(taps) = bilinear_taps(u, v, self.width, self.height) else {
            return ([0.0; 3], 0.0);
        };
        let base = d * self.width * self.height;
        let mut c = [0.0f32; 3];
        let mut a = 0.0f32;
        for (i, w) in taps {
            if w == 0.0 {
                continue;
            }
            let w = w as f32;
            let j = base + i;
            c[0] += w * self.color[3 * j];
            c[1] += w * self.color[3 * j + 1];
            c[2] += w * self.color[3 * j + 2];
            a += w * self.alpha[j];
        }
        (c, a)
    }

    /// Composites the planes at padded texel `(x, y)` with no warp.
    pub fn composite_texel(&self, x: usize, y: usize) -> [f32; 3] {
        composite_unchecked((0..self.depth_count()).map(|d| self.texel(d, x, y)))
    }

    /// Renders the view of `target`. Reference-image pixel `(u, v)` lives at
    /// texel `(u + pad, v + pad)`; the output has the target's resolution,
    /// which for rig cameras is the unpadded extent.
    pub fn render_view(&self, reference: &Camera, target: &Camera) -> Result<FloatImage> {
        self.check_reference(reference)?;
        let (w, h) = (target.width as usize, target.height as usize);
        let pad = self.pad as f64;
        let mut out = FloatImage::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let ray = RefRay::new(&pixel_ray(target, (x as f64, y as f64), self.t), reference);
                let rgb = composite_unchecked(self.planes.depths.iter().enumerate().map(|(d, &depth)| {
                    match ray.sample(reference, depth) {
                        Some((u, v)) => self.sample0(d, u + pad, v + pad),
                        None => ([0.0; 3], 0.0),
                    }
                }));
                out.pixel_mut(x, y).copy_from_slice(&rgb);
            }
        }
        Ok(out)
    }

    fn check_reference(&self, reference: &Camera) -> Result<()> {
        ensure!(
            reference.width as usize + 2 * self.pad == self.width
                && reference.height as usize + 2 * self.pad == self.height,
            Shape,
            "reference camera {}x{} plus pad {} does not match plane extent {}x{}",
            reference.width,
            reference.height,
            self.pad,
            self.width,
            self.height
        );
        Ok(())
    }

    /// Plane `d` (0-based) as an RGBA image.
    pub fn plane_image(&self, d: usize) -> FloatImage {
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(4 * n);
        for i in d * n..(d + 1) * n {
            data.extend_from_slice(&self.color[3 * i..3 * i + 3]);
            data.push(self.alpha[i]);
        }
        FloatImage {
            width: self.width,
            height: self.height,
            channels: 4,
            data,
        }
    }

    /// All planes tiled left to right, far to near, into one RGBA image of
    /// width `D * width`.
    pub fn atlas(&self) -> FloatImage {
        let dcount = self.depth_count();
        let mut img = FloatImage::new(dcount * self.width, self.height, 4);
        for d in 0..dcount {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (c, a) = self.texel(d, x, y);
                    img.pixel_mut(d * self.width + x, y)
                        .copy_from_slice(&[c[0], c[1], c[2], a]);
                }
            }
        }
        img
    }

    pub fn sidecar(&self, reference: &Camera) -> PlanesJson {
        PlanesJson {
            depths: self.planes.depths.clone(),
            pad: self.pad,
            t: self.t,
            width: self.width,
            height: self.height,
            near: self.planes.near,
            far: self.planes.far,
            reference_id: self.planes.reference.clone(),
            reference: reference.clone().into(),
        }
    }

    /// Writes `plane_<d>.png` (1-based `d`, far to near) and `planes.json`.
    pub fn export(&self, dir: &Path, reference: &Camera) -> Result<()> {
        self.check_reference(reference)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in 0..self.depth_count() {
            self.plane_image(d).save_png(&dir.join(format!("plane_{}.png", d + 1)))?;
        }
        let path = dir.join("planes.json");
        let json = serde_json::to_string_pretty(&self.sidecar(reference))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Reads a stack written by [`MpiVolume::export`]. Values come back
    /// quantized to 8 bits.
    pub fn import(dir: &Path) -> Result<(Self, Camera)> {
        let path = dir.join("planes.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PlanesJson = serde_json::from_str(&text)?;
        let camera = Camera::try_from(meta.reference.clone())?;
        let planes = PlaneSet {
            reference: meta.reference_id.clone(),
            near: meta.near,
            far: meta.far,
            depths: meta.depths.clone(),
        };
        let n = meta.width * meta.height;
        let mut color = Vec::with_capacity(3 * n * planes.len());
        let mut alpha = Vec::with_capacity(n * planes.len());
        for d in 0..planes.len() {
            let p = dir.join(format!("plane_{}.png", d + 1));
            let img = FloatImage::load_rgba(&p)?;
            if img.width != meta.width || img.height != meta.height {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    img.width,
                    img.height,
                    meta.width,
                    meta.height
                )));
            }
            for px in img.data.chunks_exact(4) {
                color.extend_from_slice(&px[..3]);
                alpha.push(px[3]);
            }
        }
        let vol = Self::new(planes, meta.width, meta.height, meta.pad, meta.t, color, alpha)?;
        Ok((vol, camera))
    }
}

/// Metadata written next to exported planes and served with the atlas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanesJson {
    /// Plane depths, far to near.
    pub depths: Vec<f64>,
    pub pad: usize,
    pub t: u32,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub reference_id: String,
    pub reference: CameraJson,
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::geometry::make_planes;

    #[test]
    fn weights_examples() {
        assert_eq!(transmittance_weights(&[0.5f64]).unwrap(), vec![0.5]);
        assert_eq!(transmittance_weights(&[1.0f64, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(transmittance_weights(&[0.5f64, 0.5, 0.5]).unwrap(), vec![0.125, 0.25, 0.5]);
        assert!(matches!(transmittance_weights(&[1.5f64]), Err(Error::Contract(_))));
        assert!(transmittance_weights(&[f64::NAN]).is_err());
    }

    #[test]
    fn composite_examples() {
        let c = composite_ray(&[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0.5, 1.0]).unwrap();
        assert_eq!(c, [0.0, 1.0, 0.0]);
        let c = composite_ray(&[[0.3f64, 0.7, 0.9]; 3], &[0.0; 3]).unwrap();
        assert_eq!(c, [0.0; 3]);
        assert!(composite_ray(&[[1.2f64, 0.0, 0.0]], &[0.5]).is_err());
    }

    fn ramp() -> MpiVolume {
        let planes = make_planes(1.0, 4.0, 2).unwrap();
        MpiVolume::from_fn(planes, 6, 5, 1, 1, |d, x, y| {
            ([x as f32 / 5.0, y as f32 / 4.0, d as f32], 0.25 + 0.1 * x as f32)
        })
        .unwrap()
    }

    #[test]
    fn sampling_nodes_midpoints_and_padding() {
        let vol = ramp();
        assert_eq!(vol.sample_plane(2, 3.0, 2.0).unwrap(), vol.texel(1, 3, 2));
        let (c, a) = vol.sample_plane(1, 2.5, 1.0).unwrap();
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(a, 0.5 * (0.45 + 0.55), epsilon = 1e-6);
        assert_eq!(vol.sample_plane(1, -50.0, 2.0).unwrap(), ([0.0; 3], 0.0));
        assert_eq!(vol.sample_plane(1, 2.0, 1e9).unwrap(), ([0.0; 3], 0.0));
        // Half a texel past the edge blends with transparent black.
        let (_, a) = vol.sample_plane(1, 5.5, 0.0).unwrap();
        assert_relative_eq!(a, 0.5 * 0.75, epsilon = 1e-6);
        assert!(vol.sample_plane(0, 1.0, 1.0).is_err());
        assert!(vol.sample_plane(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn identity_view_composites_texels() {
        let vol = ramp();
        let cam = Camera::looking_forward(3.0, 4, 3, nalgebra::Vector3::zeros()).unwrap();
        let img = vol.render_view(&cam, &cam).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let want = vol.composite_texel(x + 1, y + 1);
                for k in 0..3 {
                    assert!((img.pixel(x, y)[k] - want[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn atlas_tiles_far_to_near() {
        let vol = ramp();
        let atlas = vol.atlas();
        assert_eq!(atlas.width, 2 * 6);
        assert_eq!(atlas.pixel(6 + 2, 3)[2], 1.0);
        assert_eq!(atlas.pixel(2, 3)[2], 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let vol = ramp();
        let cam = Camera::looking_forward(3.0, 4, 3, nalgebra::Vector3::zeros()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        vol.export(dir.path(), &cam).unwrap();
        assert!(dir.path().join("plane_1.png").exists());
        assert!(dir.path().join("plane_2.png").exists());
        let (back, cam2) = MpiVolume::import(dir.path()).unwrap();
        assert_eq!(cam2, cam);
        assert_eq!(back.planes, vol.planes);
        for (a, b) in back.color().iter().zip(vol.color()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
}
