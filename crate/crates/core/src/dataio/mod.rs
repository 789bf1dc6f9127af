//! Dataset manifests, frame loading and the synthetic scene generator.
//!
//! On disk a dataset is a `manifest.json` next to an `images/` directory
//! holding `t<tt>_cam<kk>.png` (1-based timestamp, camera index as listed).

mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_planes, Camera, CameraJson, PlaneSet};
use crate::imaging::FloatImage;

pub use synthetic::{
    render_frame, synth_scene, synthetic_mpi, Motion, Primitive, RigSpec, Shape, SyntheticSceneSpec, Texture,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    #[serde(flatten)]
    pub camera: CameraJson,
}

/// One `(t, camera)` pair; `t` is 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub t: usize,
    pub camera: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub t: usize,
    pub camera: String,
    /// Relative to the manifest directory.
    pub path: String,
}

/// A synchronized multi-view video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub scene: String,
    #[serde(rename = "T")]
    pub timestamps: usize,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    /// Camera whose frame holds the MPI planes.
    pub reference: String,
    pub cameras: Vec<CameraEntry>,
    #[serde(default)]
    pub held_out: Vec<String>,
    pub frames: Vec<FrameEntry>,
    /// Pairs known to have no image.
    #[serde(default)]
    pub missing: Vec<FrameKey>,
}

pub fn frame_file_name(t: usize, camera_index: usize) -> String {
    format!("t{t:02}_cam{camera_index:02}.png")
}

impl DatasetManifest {
    /// Schema-level checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return bad(format!(
                "unsupported manifest schema version {} (supported: {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.timestamps == 0 || self.cameras.is_empty() {
            return bad("manifest needs at least one timestamp and one camera".into());
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad(format!("invalid depth bounds near={} far={}", self.near, self.far));
        }
        let mut ids = HashSet::new();
        for c in &self.cameras {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate camera id {:?}", c.id));
            }
            let cam = Camera::try_from(c.camera.clone())
                .map_err(|e| Error::Manifest(format!("camera {:?}: {e}", c.id)))?;
            if cam.width != self.width || cam.height != self.height {
                return bad(format!(
                    "camera {:?} is {}x{}, dataset resolution is {}x{}",
                    c.id, cam.width, cam.height, self.width, self.height
                ));
            }
        }
        if !ids.contains(self.reference.as_str()) {
            return bad(format!("reference camera {:?} is not in the camera list", self.reference));
        }
        for h in &self.held_out {
            if !ids.contains(h.as_str()) {
                return bad(format!("held-out camera {h:?} is not in the camera list"));
            }
        }
        let mut seen = HashSet::new();
        for f in self.frames.iter().map(|f| FrameKey {
            t: f.t,
            camera: f.camera.clone(),
        }) {
            if !(1..=self.timestamps).contains(&f.t) || !ids.contains(f.camera.as_str()) {
                return bad(format!("frame (t={}, camera={:?}) is outside the dataset", f.t, f.camera));
            }
            if !seen.insert(f.clone()) {
                return bad(format!("frame (t={}, camera={:?}) listed twice", f.t, f.camera));
            }
        }
        let missing: HashSet<&FrameKey> = self.missing.iter().collect();
        let mut absent = Vec::new();
        for t in 1..=self.timestamps {
            for c in &self.cameras {
                let key = FrameKey {
                    t,
                    camera: c.id.clone(),
                };
                if !seen.contains(&key) && !missing.contains(&key) {
                    absent.push(format!("(t={t}, camera={})", c.id));
                }
            }
        }
        if !absent.is_empty() {
            return bad(format!("no image for {}", absent.join(", ")));
        }
        Ok(())
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn reference_index(&self) -> usize {
        self.camera_index(&self.reference).expect("validated manifest")
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        self.held_out.iter().filter_map(|h| self.camera_index(h)).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        let held: HashSet<usize> = self.held_out_indices().into_iter().collect();
        (0..self.cameras.len()).filter(|k| !held.contains(k)).collect()
    }

    pub fn camera_list(&self) -> Result<Vec<Camera>> {
        self.cameras.iter().map(|c| Camera::try_from(c.camera.clone())).collect()
    }

    /// Planes for the MPI frame: `count` planes uniform in disparity between
    /// the dataset bounds, tagged with the reference camera id.
    pub fn plane_set(&self, count: usize) -> Result<PlaneSet> {
        Ok(make_planes(self.near, self.far, count)?.with_reference(self.reference.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest, including that every listed image file
/// exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    // Check the version before the rest of the schema so an unknown
    // version is reported as such rather than as a field mismatch.
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Manifest(format!(
                "unsupported manifest schema version {v} (supported: {MANIFEST_SCHEMA_VERSION})"
            )))
        }
        None => return Err(Error::Manifest("manifest has no schema_version".into())),
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    for f in &manifest.frames {
        let p = root.join(&f.path);
        if !p.is_file() {
            return Err(Error::Manifest(format!(
                "image for (t={}, camera={}) not found at {}",
                f.t,
                f.camera,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

/// An 8-bit image as RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<FloatImage> {
    FloatImage::load_rgb(path)
}

/// A manifest with all frames in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    /// `frames[t - 1][k]`.
    pub frames: Vec<Vec<Option<FloatImage>>>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let cameras = manifest.camera_list()?;
        let mut frames = vec![vec![None; cameras.len()]; manifest.timestamps];
        for f in &manifest.frames {
            let img = load_image(&root.join(&f.path))?;
            if img.width != manifest.width as usize || img.height != manifest.height as usize {
                return Err(Error::Manifest(format!(
                    "image for (t={}, camera={}) is {}x{}, expected {}x{}",
                    f.t, f.camera, img.width, img.height, manifest.width, manifest.height
                )));
            }
            let k = manifest.camera_index(&f.camera).expect("validated manifest");
            frames[f.t - 1][k] = Some(img);
        }
        Ok(Self {
            manifest,
            root,
            cameras,
            frames,
        })
    }

    /// Frame at 1-based `t` from camera index `k`.
    pub fn frame(&self, t: usize, k: usize) -> Option<&FloatImage> {
        self.frames.get(t.wrapping_sub(1))?.get(k)?.as_ref()
    }

    pub fn reference_camera(&self) -> &Camera {
        &self.cameras[self.manifest.reference_index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(timestamps: usize) -> SyntheticSceneSpec {
        let mut spec = SyntheticSceneSpec::desk(timestamps, 8).unwrap();
        spec.rig.count = 3;
        spec.rig.reference = 1;
        spec.rig.held_out = vec![0];
        spec
    }

    #[test]
    fn synthesized_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(2);
        let written = synth_scene(&spec, dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(written, loaded);
        let data = Dataset::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(data.manifest.train_indices(), vec![1, 2]);
        assert_eq!(data.manifest.held_out_indices(), vec![0]);
        assert!(data.frame(2, 2).is_some());
        assert!(data.frame(3, 0).is_none());
        assert!(data.frame(0, 0).is_none());
    }

    #[test]
    fn absent_pair_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synth_scene(&small_spec(2), dir.path()).unwrap();
        m.frames.retain(|f| !(f.t == 2 && f.camera == "cam01"));
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("t=2, camera=cam01"), "{err}");
        m.missing.push(FrameKey {
            t: 2,
            camera: "cam01".into(),
        });
        m.validate().unwrap();
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_scene(&small_spec(1), dir.path()).unwrap();
        let mut v = serde_json::to_value(&m).unwrap();
        v["schema_version"] = 7.into();
        let path = dir.path().join("manifest.json");
        fs::write(&path, v.to_string()).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("schema version 7"), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        synth_scene(&small_spec(1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("images").join(frame_file_name(1, 2))).unwrap();
        let err = load_manifest(&dir.path().join("manifest.json")).unwrap_err().to_string();
        assert!(err.contains("t=1, camera=cam02"), "{err}");
    }

    #[test]
    fn white_pixels_load_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        FloatImage::from_u8(3, 2, 3, &[255; 18]).unwrap().save_png(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
        let black = FloatImage::from_u8(1, 1, 3, &[0; 3]).unwrap();
        assert_eq!(black.data, vec![0.0; 3]);
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let mut spec = small_spec(3);
        for p in &mut spec.primitives {
            p.motion = Motion::default();
        }
        let cam = &spec.cameras().unwrap()[1];
        let a = render_frame(&spec, cam, 1);
        assert_eq!(a, render_frame(&spec, cam, 2));
        assert_eq!(a, render_frame(&spec, cam, 3));
    }

    #[test]
    fn translating_plane_shifts_one_pixel_per_frame() {
        let depth = 4.0;
        let focal = 50.0;
        let spec = SyntheticSceneSpec {
            name: "shift".into(),
            timestamps: 4,
            width: 40,
            height: 20,
            near: 1.0,
            far: 10.0,
            seed: 3,
            rig: RigSpec {
                count: 1,
                baseline: 0.0,
                focal,
                reference: 0,
                held_out: vec![],
            },
            primitives: vec![Primitive {
                depth,
                shape: Shape::Full,
                texture: Texture::Checker {
                    a: [1.0, 0.0, 0.0],
                    b: [0.0, 0.0, 1.0],
                    period: 3.0 * depth / focal,
                },
                opacity: 1.0,
                motion: Motion {
                    start: [0.0, 0.0],
                    velocity: [depth / focal, 0.0],
                },
            }],
        };
        let cam = &spec.cameras().unwrap()[0];
        let f1 = render_frame(&spec, cam, 1);
        for t in 2..=4 {
            let ft = render_frame(&spec, cam, t);
            let s = t - 1;
            for y in 0..20 {
                for x in s..40 {
                    assert_eq!(ft.pixel(x, y), f1.pixel(x - s, y), "t={t} x={x} y={y}");
                }
            }
        }
    }

    #[test]
    fn near_occluder_hides_far_plane_with_sharp_edge() {
        let spec = SyntheticSceneSpec {
            name: "edge".into(),
            timestamps: 1,
            width: 21,
            height: 5,
            near: 1.0,
            far: 10.0,
            seed: 0,
            rig: RigSpec {
                count: 1,
                baseline: 0.0,
                focal: 10.0,
                reference: 0,
                held_out: vec![],
            },
            primitives: vec![
                Primitive {
                    depth: 2.0,
                    shape: Shape::Rect {
                        center: [-1.0, 0.0],
                        half_size: [1.0, 5.0],
                        softness: 0.0,
                    },
                    texture: Texture::Constant { rgb: [0.0, 1.0, 0.0] },
                    opacity: 1.0,
                    motion: Motion::default(),
                },
                Primitive {
                    depth: 8.0,
                    shape: Shape::Full,
                    texture: Texture::Constant { rgb: [1.0, 0.0, 0.0] },
                    opacity: 1.0,
                    motion: Motion::default(),
                },
            ],
        };
        let img = render_frame(&spec, &spec.cameras().unwrap()[0], 1);
        // Occluder spans x in [-2, 0] at depth 2, so pixels u <= 10 are green.
        for x in 0..21 {
            let want: &[f32] = if x <= 10 { &[0.0, 1.0, 0.0] } else { &[1.0, 0.0, 0.0] };
            assert_eq!(img.pixel(x, 2), want, "x={x}");
        }
    }

    #[test]
    fn desk_scene_projects_through_its_mpi() {
        let spec = small_spec(2);
        let cams = spec.cameras().unwrap();
        let planes = make_planes(spec.near, spec.far, 8).unwrap();
        let reference = &cams[spec.rig.reference];
        let mpi = synthetic_mpi(&spec, 2, &planes, reference, 10).unwrap();
        for cam in &cams {
            let exact = render_frame(&spec, cam, 2);
            let via = mpi.render_view(reference, cam).unwrap();
            let mse: f64 = exact
                .data
                .iter()
                .zip(&via.data)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / exact.data.len() as f64;
            let psnr = -10.0 * mse.log10();
            assert!(psnr > 30.0, "psnr {psnr}");
        }
    }

    #[test]
    fn off_plane_primitive_is_rejected() {
        let mut spec = small_spec(1);
        spec.primitives[1].depth = 3.3;
        let cams = spec.cameras().unwrap();
        let planes = make_planes(spec.near, spec.far, 8).unwrap();
        assert!(synthetic_mpi(&spec, 1, &planes, &cams[1], 4).is_err());
    }
}
