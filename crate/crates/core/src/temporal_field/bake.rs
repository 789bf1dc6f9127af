//! Explicit coefficient volumes and the per-timestamp bake.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "TMPIBAKE"
//! version  u32
//! hlen     u64
//! header   hlen bytes of JSON (BakeHeader)
//! coeffs   f32 [D][B][4][N][16]   channels r, g, b, alpha
//! basis    f32 [T][4][N]
//! static   f32 [D / repeat][B][3][16]
//! ```
//!
//! Each plane's `H * W` texels (row-major) are split into `B = ceil(H * W /
//! 16)` blocks of 16; the tail of the last block is zero.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fastmath::fast_sigmoid;
use super::TemporalMpiModel;
use crate::diffcore::Real;
use crate::error::{ensure, Error, Result};
use crate::geometry::{Camera, PlaneSet};
use crate::mpi::MpiVolume;

pub const BAKED_MAGIC: &[u8; 8] = b"TMPIBAKE";
pub const BAKED_VERSION: u32 = 1;

/// Voxels materialized per coefficient-network call.
const BAKE_CHUNK: usize = 4096;

/// Texels per storage block. Within a block every coefficient forms one
/// contiguous row of `LANES` values, which keeps the bake sweep vectorized.
pub const LANES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BakeHeader {
    #[serde(rename = "D")]
    pub planes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "N_basis")]
    pub basis: usize,
    #[serde(rename = "T")]
    pub timestamps: usize,
    pub pad: usize,
    pub static_repeat: usize,
    pub depths: Vec<f64>,
    pub near: f64,
    pub far: f64,
    pub reference_id: String,
    pub reference: Camera,
}

impl BakeHeader {
    pub fn validate(&self) -> Result<()> {
        self.plane_set().validate()?;
        ensure!(
            self.planes == self.depths.len(),
            Format,
            "header lists {} depths for D={}",
            self.depths.len(),
            self.planes
        );
        ensure!(
            self.basis >= 1 && self.timestamps >= 1 && self.width > 2 * self.pad && self.height > 2 * self.pad,
            Format,
            "degenerate baked volume {:?}",
            (self.width, self.height, self.basis, self.timestamps, self.pad)
        );
        ensure!(
            self.static_repeat >= 1 && self.planes.is_multiple_of(self.static_repeat),
            Format,
            "D={} not divisible by static repeat {}",
            self.planes,
            self.static_repeat
        );
        ensure!(
            self.reference.width as usize + 2 * self.pad == self.width
                && self.reference.height as usize + 2 * self.pad == self.height,
            Format,
            "reference camera size does not match the padded extent"
        );
        Ok(())
    }

    pub fn plane_set(&self) -> PlaneSet {
        PlaneSet {
            reference: self.reference_id.clone(),
            near: self.near,
            far: self.far,
            depths: self.depths.clone(),
        }
    }

    pub fn voxels(&self) -> usize {
        self.planes * self.height * self.width
    }

    pub fn static_planes(&self) -> usize {
        self.planes / self.static_repeat
    }

    /// Number of cached coefficients, `D * H * W * 4 * N`.
    pub fn coefficient_count(&self) -> usize {
        self.voxels() * 4 * self.basis
    }

    /// Texel blocks per plane; the last block of a plane may be partial.
    pub fn blocks_per_plane(&self) -> usize {
        (self.width * self.height).div_ceil(LANES)
    }

    /// Stored coefficient values, including the zero tail of partial blocks.
    pub fn coefficient_storage(&self) -> usize {
        self.planes * self.blocks_per_plane() * 4 * self.basis * LANES
    }

    pub fn static_storage(&self) -> usize {
        self.static_planes() * self.blocks_per_plane() * 3 * LANES
    }

    /// Storage index of coefficient `n` of channel `ch` (r, g, b, alpha) at
    /// 0-based flat voxel `vox`.
    #[inline]
    pub fn coeff_index(&self, vox: usize, ch: usize, n: usize) -> usize {
        let plane = self.width * self.height;
        let (d, i) = (vox / plane, vox % plane);
        (((d * self.blocks_per_plane() + i / LANES) * 4 + ch) * self.basis + n) * LANES + i % LANES
    }

    /// Storage index of channel `ch` of static plane `s` at texel `i` of
    /// the plane.
    #[inline]
    pub fn static_index(&self, s: usize, i: usize, ch: usize) -> usize {
        ((s * self.blocks_per_plane() + i / LANES) * 3 + ch) * LANES + i % LANES
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    #[serde(flatten)]
    header: BakeHeader,
}

/// Cached coefficient volume, basis table and static color; everything a
/// time-instance bake needs.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedCoefficients {
    pub header: BakeHeader,
    /// Blocked `[D][B][4][N][16]`; see [`BakeHeader::coeff_index`].
    pub coeffs: Vec<f32>,
    /// `[T][4][N]`.
    pub basis: Vec<f32>,
    /// Raw static color, blocked `[D / repeat][B][3][16]`.
    pub static_color: Vec<f32>,
}

impl BakedCoefficients {
    pub fn new(header: BakeHeader, coeffs: Vec<f32>, basis: Vec<f32>, static_color: Vec<f32>) -> Result<Self> {
        header.validate()?;
        let n4 = 4 * header.basis;
        ensure!(
            coeffs.len() == header.coefficient_storage(),
            Shape,
            "coefficient volume has {} values, expected {}",
            coeffs.len(),
            header.coefficient_storage()
        );
        ensure!(
            basis.len() == header.timestamps * n4,
            Shape,
            "basis table has {} values, expected {}",
            basis.len(),
            header.timestamps * n4
        );
        let s = header.static_storage();
        ensure!(static_color.len() == s, Shape, "static volume has {} values, expected {s}", static_color.len());
        Ok(Self {
            header,
            coeffs,
            basis,
            static_color,
        })
    }

    pub fn from_model<R: Real>(model: &TemporalMpiModel<R>) -> Result<Self> {
        let c = &model.config;
        let n = c.basis;
        let header = BakeHeader {
            planes: c.planes,
            height: c.height,
            width: c.width,
            basis: n,
            timestamps: c.timestamps,
            pad: c.pad,
            static_repeat: c.static_repeat,
            depths: model.planes.depths.clone(),
            near: model.planes.near,
            far: model.planes.far,
            reference_id: model.planes.reference.clone(),
            reference: model.reference.clone(),
        };
        let voxels = c.voxels();
        let mut coeffs = vec![0.0f32; header.coefficient_storage()];
        let ids: Vec<usize> = (0..voxels).collect();
        for chunk in ids.chunks(BAKE_CHUNK) {
            let x = model.encode_voxels(chunk);
            let kc = model.params.coeff_color.eval(&model.store, &x)?;
            let ka = model.params.coeff_alpha.eval(&model.store, &x)?;
            for (row, &vox) in chunk.iter().enumerate() {
                let (kc, ka) = (kc.row(row), ka.row(row));
                for j in 0..n {
                    for ch in 0..3 {
                        coeffs[header.coeff_index(vox, ch, j)] = kc[3 * j + ch].f64() as f32;
                    }
                    coeffs[header.coeff_index(vox, 3, j)] = ka[j].f64() as f32;
                }
            }
        }
        let (bc, ba) = model.eval_basis_table()?;
        let mut basis = vec![0.0f32; c.timestamps * 4 * n];
        for t in 0..c.timestamps {
            let dst = &mut basis[t * 4 * n..(t + 1) * 4 * n];
            for j in 0..n {
                for ch in 0..3 {
                    dst[ch * n + j] = bc.row(t)[3 * j + ch].f64() as f32;
                }
                dst[3 * n + j] = ba.row(t)[j].f64() as f32;
            }
        }
        let raw = model.store.value(model.params.static_color);
        let plane = c.width * c.height;
        let mut static_color = vec![0.0f32; header.static_storage()];
        for st in 0..c.static_planes() {
            for i in 0..plane {
                for ch in 0..3 {
                    static_color[header.static_index(st, i, ch)] = raw[(st * plane + i) * 3 + ch].f64() as f32;
                }
            }
        }
        Self::new(header, coeffs, basis, static_color)
    }

    /// Volume of uniformly random coefficients, for timing.
    pub fn random(header: BakeHeader, seed: u64) -> Result<Self> {
        header.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let coeffs = gen(header.coefficient_storage());
        let basis = gen(header.timestamps * 4 * header.basis);
        let static_color = gen(header.static_storage());
        Self::new(header, coeffs, basis, static_color)
    }

    /// Basis vectors of 1-based timestamp `t` as `[4][N]`.
    pub fn basis_column(&self, t: usize) -> Result<&[f32]> {
        ensure!(
            (1..=self.header.timestamps).contains(&t),
            Contract,
            "timestamp {t} outside [1, {}]",
            self.header.timestamps
        );
        let n4 = 4 * self.header.basis;
        Ok(&self.basis[(t - 1) * n4..t * n4])
    }

    /// The MPI at 1-based timestamp `t`.
    pub fn bake_time_instance(&self, t: usize) -> Result<MpiVolume> {
        let v = self.header.voxels();
        let mut color = vec![0.0f32; 3 * v];
        let mut alpha = vec![0.0f32; v];
        self.bake_into(t, &mut color, &mut alpha)?;
        let h = &self.header;
        MpiVolume::new(h.plane_set(), h.width, h.height, h.pad, t as u32, color, alpha)
    }

    /// Bakes into caller-provided `[D][H][W][3]` color and `[D][H][W]` alpha
    /// buffers: one multiply-add sweep plus a sigmoid per channel.
    pub fn bake_into(&self, t: usize, color: &mut [f32], alpha: &mut [f32]) -> Result<()> {
        let basis = self.basis_column(t)?;
        let h = &self.header;
        ensure!(
            color.len() == 3 * h.voxels() && alpha.len() == h.voxels(),
            Shape,
            "bake buffers have {} / {} values for {} voxels",
            color.len(),
            alpha.len(),
            h.voxels()
        );
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was just detected.
            unsafe { self.sweep_avx512(basis, color, alpha) };
            return Ok(());
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { self.sweep_avx2(basis, color, alpha) };
            return Ok(());
        }
        self.sweep_dispatch(basis, color, alpha);
        Ok(())
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn sweep_avx512(&self, basis: &[f32], color: &mut [f32], alpha: &mut [f32]) {
        self.sweep_dispatch(basis, color, alpha)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn sweep_avx2(&self, basis: &[f32], color: &mut [f32], alpha: &mut [f32]) {
        self.sweep_dispatch(basis, color, alpha)
    }

    /// Monomorphizes the sweep for common basis counts so the inner loops
    /// unroll.
    #[inline(always)]
    fn sweep_dispatch(&self, basis: &[f32], color: &mut [f32], alpha: &mut [f32]) {
        match self.header.basis {
            1 => self.sweep(1, basis, color, alpha),
            2 => self.sweep(2, basis, color, alpha),
            3 => self.sweep(3, basis, color, alpha),
            4 => self.sweep(4, basis, color, alpha),
            5 => self.sweep(5, basis, color, alpha),
            8 => self.sweep(8, basis, color, alpha),
            9 => self.sweep(9, basis, color, alpha),
            13 => self.sweep(13, basis, color, alpha),
            n => self.sweep(n, basis, color, alpha),
        }
    }

    #[inline(always)]
    fn sweep(&self, n: usize, basis: &[f32], color: &mut [f32], alpha: &mut [f32]) {
        let h = &self.header;
        let plane = h.width * h.height;
        let blocks = h.blocks_per_plane();
        let block_len = 4 * n * LANES;
        for d in 0..h.planes {
            let s = d / h.static_repeat;
            let coeffs = &self.coeffs[d * blocks * block_len..][..blocks * block_len];
            let statics = &self.static_color[s * blocks * 3 * LANES..][..blocks * 3 * LANES];
            let out_c = &mut color[d * plane * 3..][..plane * 3];
            let out_a = &mut alpha[d * plane..][..plane];
            for b in 0..blocks {
                let co = &coeffs[b * block_len..][..block_len];
                let st = &statics[b * 3 * LANES..][..3 * LANES];
                let mut raw = [[0.0f32; LANES]; 4];
                for ch in 0..4 {
                    let acc = &mut raw[ch];
                    if ch < 3 {
                        acc.copy_from_slice(&st[ch * LANES..][..LANES]);
                    }
                    for k in 0..n {
                        let w = basis[ch * n + k];
                        let row = &co[(ch * n + k) * LANES..][..LANES];
                        for j in 0..LANES {
                            acc[j] += row[j] * w;
                        }
                    }
                    for x in acc.iter_mut() {
                        *x = fast_sigmoid(*x);
                    }
                }
                let base = b * LANES;
                let len = LANES.min(plane - base);
                let oc = &mut out_c[3 * base..3 * (base + len)];
                for j in 0..len {
                    oc[3 * j] = raw[0][j];
                    oc[3 * j + 1] = raw[1][j];
                    oc[3 * j + 2] = raw[2][j];
                }
                out_a[base..base + len].copy_from_slice(&raw[3][..len]);
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.payload_len() + 1024);
        self.write_to(&mut out)?;
        Ok(out)
    }

    fn payload_len(&self) -> usize {
        4 * (self.coeffs.len() + self.basis.len() + self.static_color.len())
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_vec(&FileHeader {
            format: "tmpi-baked".into(),
            version: BAKED_VERSION,
            header: self.header.clone(),
        })?;
        let io = |e| Error::io("<baked>", e);
        w.write_all(BAKED_MAGIC).map_err(io)?;
        w.write_all(&BAKED_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for vals in [&self.coeffs, &self.basis, &self.static_color] {
            for chunk in vals.chunks(1 << 14) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 20, Format, "truncated baked volume");
        ensure!(&bytes[..8] == BAKED_MAGIC, Format, "not a baked volume (bad magic)");
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        ensure!(
            version == BAKED_VERSION,
            Format,
            "unsupported baked volume version {version} (expected {BAKED_VERSION})"
        );
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        ensure!(body.len() >= hlen, Format, "truncated baked volume header");
        let fh: FileHeader = serde_json::from_slice(&body[..hlen])?;
        ensure!(fh.format == "tmpi-baked", Format, "unexpected format tag {:?}", fh.format);
        let h = fh.header;
        h.validate()?;
        let counts = [h.coefficient_storage(), h.timestamps * 4 * h.basis, h.static_storage()];
        let mut rest = &body[hlen..];
        let expected: usize = counts.iter().sum::<usize>() * 4;
        ensure!(
            rest.len() == expected,
            Format,
            "baked payload is {} bytes, expected {expected}",
            rest.len()
        );
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(4 * n);
            rest = tail;
            head.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>()
        };
        let coeffs = take(counts[0]);
        let basis = take(counts[1]);
        let static_color = take(counts[2]);
        Self::new(h, coeffs, basis, static_color)
    }
}

/// Median wall-clock time of `repeats` bakes of timestamp `t` into
/// preallocated buffers.
pub fn bench_bake(baked: &BakedCoefficients, t: usize, repeats: usize) -> Result<Duration> {
    let v = baked.header.voxels();
    let mut color = vec![0.0f32; 3 * v];
    let mut alpha = vec![0.0f32; v];
    // Warm-up touches the output pages once.
    baked.bake_into(t, &mut color, &mut alpha)?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        baked.bake_into(t, &mut color, &mut alpha)?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}
