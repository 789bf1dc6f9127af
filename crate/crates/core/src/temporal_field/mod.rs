//! The temporal MPI field: a static color volume plus per-voxel coefficients
//! over a small learned temporal basis.
//!
//! A voxel's raw color at time `t` is `K0[static plane] + sum_n Kc_n * bc_n(t)`
//! (per channel) and its raw alpha is `sum_n Ka_n * ba_n(t)`; both go through
//! a sigmoid. Coefficients come from MLPs over a positional encoding of the
//! voxel position, basis vectors from MLPs over a learned time embedding.

mod bake;
mod fastmath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Init, Matrix, Mlp, MlpSpec, ParamId, ParamStore, Real};
use crate::error::{ensure, Error, Result};
use crate::geometry::{Camera, PlaneSet};
use crate::mpi::bilinear_taps;

pub use bake::{bench_bake, BakeHeader, BakedCoefficients, BAKED_MAGIC, BAKED_VERSION};
pub use fastmath::{fast_exp, fast_sigmoid};

/// Shape and capacity of a temporal MPI model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of depth planes `D`.
    pub planes: usize,
    /// Number of temporal basis elements `N`.
    pub basis: usize,
    /// Number of timestamps `T`.
    pub timestamps: usize,
    /// Padded plane width (image width plus `2 * pad`).
    pub width: usize,
    /// Padded plane height.
    pub height: usize,
    pub pad: usize,
    /// Positional-encoding levels `l` (frequencies `2^0 .. 2^l`).
    pub pe_levels: usize,
    pub embed_width: usize,
    pub coeff_layers: usize,
    pub coeff_hidden: usize,
    pub basis_layers: usize,
    pub basis_hidden: usize,
    /// Depth planes sharing one static color plane.
    pub static_repeat: usize,
    /// When false the static color volume is held at zero.
    pub use_static: bool,
    /// When false all coefficients are held at zero.
    pub use_dynamic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            planes: 32,
            basis: 5,
            timestamps: 24,
            width: 596,
            height: 320,
            pad: 10,
            pe_levels: 3,
            embed_width: 32,
            coeff_layers: 8,
            coeff_hidden: 384,
            basis_layers: 4,
            basis_hidden: 64,
            static_repeat: 8,
            use_static: true,
            use_dynamic: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.planes >= 1, Contract, "need at least one plane");
        ensure!(self.basis >= 1, Contract, "need at least one basis element");
        ensure!(self.timestamps >= 1, Contract, "need at least one timestamp");
        ensure!(
            self.width >= 2 && self.height >= 2,
            Contract,
            "plane extent {}x{} too small",
            self.width,
            self.height
        );
        ensure!(
            self.width > 2 * self.pad && self.height > 2 * self.pad,
            Contract,
            "pad {} leaves no interior in {}x{}",
            self.pad,
            self.width,
            self.height
        );
        ensure!(
            self.static_repeat >= 1 && self.planes.is_multiple_of(self.static_repeat),
            Contract,
            "plane count {} is not divisible by the static repeat factor {}",
            self.planes,
            self.static_repeat
        );
        ensure!(self.embed_width >= 1, Contract, "embedding width must be positive");
        self.coeff_color_spec().validate()?;
        self.basis_color_spec().validate()?;
        Ok(())
    }

    pub fn static_planes(&self) -> usize {
        self.planes / self.static_repeat
    }

    /// 0-based static plane of the 1-based depth plane `d`; `ceil(d / r)`
    /// in 1-based terms.
    pub fn static_plane_of(&self, d: usize) -> usize {
        (d - 1) / self.static_repeat
    }

    pub fn pe_width(&self) -> usize {
        3 * 2 * (self.pe_levels + 1)
    }

    pub fn image_width(&self) -> usize {
        self.width - 2 * self.pad
    }

    pub fn image_height(&self) -> usize {
        self.height - 2 * self.pad
    }

    pub fn voxels(&self) -> usize {
        self.planes * self.width * self.height
    }

    pub fn coeff_color_spec(&self) -> MlpSpec {
        MlpSpec::new(self.pe_width(), self.coeff_layers, self.coeff_hidden, 3 * self.basis)
    }

    pub fn coeff_alpha_spec(&self) -> MlpSpec {
        MlpSpec::new(self.pe_width(), self.coeff_layers, self.coeff_hidden, self.basis)
    }

    pub fn basis_color_spec(&self) -> MlpSpec {
        MlpSpec::new(self.embed_width, self.basis_layers, self.basis_hidden, 3 * self.basis)
    }

    pub fn basis_alpha_spec(&self) -> MlpSpec {
        MlpSpec::new(self.embed_width, self.basis_layers, self.basis_hidden, self.basis)
    }
}

/// Sin/cos features of a point in `[-1, 1]^3`: for each component `p` and
/// level `j = 0..=l`, the pair `(sin(2^j pi/2 p), cos(2^j pi/2 p))`.
pub fn positional_encode<R: Real>(x: [f64; 3], levels: usize) -> Result<Vec<R>> {
    for &p in &x {
        ensure!(
            (-1.0..=1.0).contains(&p),
            Contract,
            "encoded coordinate {p} outside [-1, 1]"
        );
    }
    let mut out = vec![R::zero(); 6 * (levels + 1)];
    encode_into(x, levels, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn encode_into<R: Real>(x: [f64; 3], levels: usize, out: &mut [R]) {
    let mut k = 0;
    for p in x {
        let mut freq = std::f64::consts::FRAC_PI_2;
        for _ in 0..=levels {
            let (s, c) = (freq * p).sin_cos();
            out[k] = R::of(s);
            out[k + 1] = R::of(c);
            k += 2;
            freq *= 2.0;
        }
    }
}

/// A location in the MPI: 1-based plane index and continuous padded texel
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialPoint {
    pub d: usize,
    pub u: f64,
    pub v: f64,
}

impl SpatialPoint {
    pub fn new(d: usize, u: f64, v: f64) -> Self {
        Self { d, u, v }
    }
}

/// Per-element color triples and alpha scalars, used both for basis vectors
/// and for coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors<R> {
    pub color: Vec<[R; 3]>,
    pub alpha: Vec<R>,
}

impl<R: Real> Factors<R> {
    /// Splits raw network outputs laid out as `[n][channel]`.
    fn from_raw(color: &[R], alpha: &[R]) -> Self {
        Self {
            color: color.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            alpha: alpha.to_vec(),
        }
    }
}

/// Everything besides the parameters needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub config: ModelConfig,
    pub planes: PlaneSet,
    pub reference: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Raw static color, shape `[D / repeat, H, W, 3]`.
    pub static_color: ParamId,
    /// Time embedding table, shape `[T, embed_width]`.
    pub time_embedding: ParamId,
    pub coeff_color: Mlp,
    pub coeff_alpha: Mlp,
    pub basis_color: Mlp,
    pub basis_alpha: Mlp,
}

/// One trained (or trainable) scene.
#[derive(Clone, Debug)]
pub struct TemporalMpiModel<R> {
    pub config: ModelConfig,
    pub planes: PlaneSet,
    /// Camera whose frame holds the planes; its image size is the unpadded
    /// plane extent.
    pub reference: Camera,
    pub store: ParamStore<R>,
    pub params: ModelParams,
}

impl<R: Real> TemporalMpiModel<R> {
    /// Fresh model: Glorot MLPs, time embedding uniform in `[-1, 1]`, static
    /// color zero (a gray start after the sigmoid).
    pub fn new(config: ModelConfig, planes: PlaneSet, reference: Camera, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, planes, reference, Init::Glorot, &mut rng)
    }

    /// Model with every parameter zero.
    pub fn zeros(config: ModelConfig, planes: PlaneSet, reference: Camera) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::build(config, planes, reference, Init::Zeros, &mut rng)?;
        m.store.value_mut(m.params.time_embedding).iter_mut().for_each(|x| *x = R::zero());
        Ok(m)
    }

    fn build(
        config: ModelConfig,
        planes: PlaneSet,
        reference: Camera,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        planes.validate()?;
        ensure!(
            planes.len() == config.planes,
            Contract,
            "plane set has {} depths, config expects {}",
            planes.len(),
            config.planes
        );
        ensure!(
            reference.width as usize == config.image_width() && reference.height as usize == config.image_height(),
            Contract,
            "reference camera is {}x{}, padded extent {}x{} with pad {} implies {}x{}",
            reference.width,
            reference.height,
            config.width,
            config.height,
            config.pad,
            config.image_width(),
            config.image_height()
        );
        let mut store = ParamStore::new();
        let s = config.static_planes();
        let static_color = store.add(
            "static_color",
            &[s, config.height, config.width, 3],
            vec![R::zero(); s * config.height * config.width * 3],
        )?;
        let embed: Vec<R> = (0..config.timestamps * config.embed_width)
            .map(|_| R::of(rng.gen_range(-1.0..1.0)))
            .collect();
        let time_embedding = store.add("time_embedding", &[config.timestamps, config.embed_width], embed)?;
        let dyn_init = if config.use_dynamic { init } else { Init::Zeros };
        let coeff_color = Mlp::new(&mut store, "coeff_color", config.coeff_color_spec(), dyn_init, rng)?;
        let coeff_alpha = Mlp::new(&mut store, "coeff_alpha", config.coeff_alpha_spec(), dyn_init, rng)?;
        let basis_color = Mlp::new(&mut store, "basis_color", config.basis_color_spec(), init, rng)?;
        let basis_alpha = Mlp::new(&mut store, "basis_alpha", config.basis_alpha_spec(), init, rng)?;
        if !config.use_static {
            store.set_trainable(static_color, false);
        }
        if !config.use_dynamic {
            for mlp in [&coeff_color, &coeff_alpha] {
                for &(w, b) in &mlp.layers {
                    store.set_trainable(w, false);
                    store.set_trainable(b, false);
                }
            }
        }
        Ok(Self {
            config,
            planes,
            reference,
            store,
            params: ModelParams {
                static_color,
                time_embedding,
                coeff_color,
                coeff_alpha,
                basis_color,
                basis_alpha,
            },
        })
    }

    pub fn description(&self) -> ModelDescription {
        ModelDescription {
            config: self.config.clone(),
            planes: self.planes.clone(),
            reference: self.reference.clone(),
        }
    }

    /// Rebuilds a model around stored parameters, checking that every block
    /// has the name and shape the description implies.
    pub fn from_parts(desc: ModelDescription, store: ParamStore<R>) -> Result<Self> {
        let mut m = Self::zeros(desc.config, desc.planes, desc.reference)?;
        ensure!(
            store.len() == m.store.len(),
            Format,
            "parameter store has {} blocks, model expects {}",
            store.len(),
            m.store.len()
        );
        for (got, want) in store.blocks().iter().zip(m.store.blocks()) {
            if got.name != want.name || got.shape != want.shape {
                return Err(Error::Format(format!(
                    "parameter block {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        m.store = store;
        Ok(m)
    }

    /// Same model in another precision.
    pub fn cast<S: Real>(&self) -> TemporalMpiModel<S> {
        TemporalMpiModel {
            config: self.config.clone(),
            planes: self.planes.clone(),
            reference: self.reference.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }

    fn check_point(&self, p: SpatialPoint) -> Result<()> {
        let c = &self.config;
        ensure!(
            (1..=c.planes).contains(&p.d),
            Contract,
            "plane index {} outside [1, {}]",
            p.d,
            c.planes
        );
        ensure!(
            p.u >= 0.0 && p.u <= (c.width - 1) as f64 && p.v >= 0.0 && p.v <= (c.height - 1) as f64,
            Contract,
            "texel ({}, {}) outside the padded extent {}x{}",
            p.u,
            p.v,
            c.width,
            c.height
        );
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.config.timestamps).contains(&t),
            Contract,
            "timestamp {t} outside [1, {}]",
            self.config.timestamps
        );
        Ok(())
    }

    /// Affine map of `(u, v, d)` onto `[-1, 1]^3`.
    pub fn encode_point(&self, p: SpatialPoint) -> [f64; 3] {
        encode_point(&self.config, p)
    }

    pub fn decode_point(&self, x: [f64; 3]) -> SpatialPoint {
        let c = &self.config;
        SpatialPoint {
            u: (x[0] + 1.0) * 0.5 * (c.width - 1) as f64,
            v: (x[1] + 1.0) * 0.5 * (c.height - 1) as f64,
            d: (((x[2] + 1.0) * 0.5 * (c.planes.max(2) - 1) as f64).round() as usize) + 1,
        }
    }

    /// Row `t` (1-based) of the time embedding table.
    pub fn time_embed(&self, t: usize) -> Result<Vec<R>> {
        self.check_t(t)?;
        let w = self.config.embed_width;
        Ok(self.store.value(self.params.time_embedding)[(t - 1) * w..t * w].to_vec())
    }

    /// Basis vectors at timestamp `t`.
    pub fn eval_basis(&self, t: usize) -> Result<Factors<R>> {
        let e = self.time_embed(t)?;
        let c = self.params.basis_color.eval_vec(&self.store, &e)?;
        let a = self.params.basis_alpha.eval_vec(&self.store, &e)?;
        Ok(Factors::from_raw(&c, &a))
    }

    /// Basis vectors for all timestamps as `(T x 3N, T x N)` matrices.
    pub fn eval_basis_table(&self) -> Result<(Matrix<R>, Matrix<R>)> {
        let (rows, cols) = (self.config.timestamps, self.config.embed_width);
        let e = Matrix::from_vec(rows, cols, self.store.value(self.params.time_embedding).to_vec())?;
        Ok((
            self.params.basis_color.eval(&self.store, &e)?,
            self.params.basis_alpha.eval(&self.store, &e)?,
        ))
    }

    /// Coefficients at a spatial location.
    pub fn eval_coeffs(&self, p: SpatialPoint) -> Result<Factors<R>> {
        self.check_point(p)?;
        let x = positional_encode::<R>(self.encode_point(p), self.config.pe_levels)?;
        let c = self.params.coeff_color.eval_vec(&self.store, &x)?;
        let a = self.params.coeff_alpha.eval_vec(&self.store, &x)?;
        Ok(Factors::from_raw(&c, &a))
    }

    /// Raw static color: bilinear sample of static plane `ceil(d / repeat)`.
    pub fn static_color(&self, p: SpatialPoint) -> Result<[R; 3]> {
        self.check_point(p)?;
        let c = &self.config;
        let plane = &self.store.value(self.params.static_color)
            [c.static_plane_of(p.d) * c.width * c.height * 3..][..c.width * c.height * 3];
        let mut out = [R::zero(); 3];
        if let Some(taps) = bilinear_taps(p.u, p.v, c.width, c.height) {
            for (i, w) in taps {
                if w != 0.0 {
                    for k in 0..3 {
                        out[k] += R::of(w) * plane[3 * i + k];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Raw (pre-sigmoid) color and alpha at `(p, t)`.
    pub fn reconstruct_raw(&self, p: SpatialPoint, t: usize) -> Result<([R; 3], R)> {
        let basis = self.eval_basis(t)?;
        let coeffs = self.eval_coeffs(p)?;
        let mut color = self.static_color(p)?;
        let mut alpha = R::zero();
        for n in 0..self.config.basis {
            for k in 0..3 {
                color[k] += coeffs.color[n][k] * basis.color[n][k];
            }
            alpha += coeffs.alpha[n] * basis.alpha[n];
        }
        Ok((color, alpha))
    }

    /// Color and alpha in `(0, 1)` at `(p, t)`.
    pub fn reconstruct_point(&self, p: SpatialPoint, t: usize) -> Result<([R; 3], R)> {
        let (c, a) = self.reconstruct_raw(p, t)?;
        Ok((c.map(|x| x.sigmoid()), a.sigmoid()))
    }

    /// Positional encodings of the given voxels (0-based flat indices into
    /// `[D][H][W]`), one row each.
    pub fn encode_voxels(&self, voxels: &[usize]) -> Matrix<R> {
        let width = self.config.pe_width();
        let mut x = Matrix::zeros(voxels.len(), width);
        for (row, &vox) in voxels.iter().enumerate() {
            let p = self.voxel_point(vox);
            encode_into(self.encode_point(p), self.config.pe_levels, x.row_mut(row));
        }
        x
    }

    /// Spatial point of a 0-based flat voxel index.
    pub fn voxel_point(&self, vox: usize) -> SpatialPoint {
        let c = &self.config;
        let plane = c.width * c.height;
        let (d, rem) = (vox / plane, vox % plane);
        SpatialPoint::new(d + 1, (rem % c.width) as f64, (rem / c.width) as f64)
    }

    /// Materializes the coefficient networks at every voxel and the basis
    /// networks at every timestamp.
    pub fn bake_coefficient_volume(&self) -> Result<BakedCoefficients> {
        BakedCoefficients::from_model(self)
    }
}

pub(crate) fn encode_point(c: &ModelConfig, p: SpatialPoint) -> [f64; 3] {
    let span = |n: usize| if n > 1 { (n - 1) as f64 } else { 1.0 };
    [
        2.0 * p.u / span(c.width) - 1.0,
        2.0 * p.v / span(c.height) - 1.0,
        if c.planes > 1 {
            2.0 * (p.d as f64 - 1.0) / span(c.planes) - 1.0
        } else {
            0.0
        },
    ]
}
