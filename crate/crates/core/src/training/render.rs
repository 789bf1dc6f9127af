//! Differentiable rendering of rays through the temporal field.
//!
//! Colors and alphas are reconstructed at texels, then bilinearly sampled
//! and composited, which is exactly what baking followed by
//! [`MpiVolume::render_view`](crate::mpi::MpiVolume::render_view) computes.
//! Each texel and each `(texel, t)` pair is reconstructed once per batch no
//! matter how many rays touch it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::diffcore::{Real, SparseMap, Tape, Var};
use crate::error::Result;
use crate::geometry::{pixel_ray, Camera, RefRay};
use crate::mpi::bilinear_taps;
use crate::temporal_field::TemporalMpiModel;

/// One ray to render: a pixel of `camera` at 1-based time `t`.
#[derive(Clone, Copy, Debug)]
pub struct RayQuery<'a> {
    pub camera: &'a Camera,
    pub pixel: (f64, f64),
    pub t: usize,
}

/// Ray/plane sampling pattern of a batch, independent of parameter values.
#[derive(Clone, Debug)]
pub struct RayPlan<R> {
    pub rays: usize,
    /// Distinct voxels (flat `[D][H][W]` indices) that receive any weight.
    pub voxels: Vec<usize>,
    /// Distinct 1-based timestamps.
    pub times: Vec<usize>,
    /// Per `(voxel, t)` pair: row in `voxels`, row in `times`, row of the
    /// static color matrix.
    pub pair_voxel: Vec<usize>,
    pub pair_time: Vec<usize>,
    pub pair_static: Vec<usize>,
    /// `(rays * D) x pairs` bilinear weights; row `r * D + d` is plane `d`
    /// (farthest first) of ray `r`.
    pub samples: Arc<SparseMap<R>>,
}

impl<R: Real> RayPlan<R> {
    pub fn new<'a>(model: &TemporalMpiModel<R>, rays: impl IntoIterator<Item = RayQuery<'a>>) -> Result<Self> {
        let c = &model.config;
        let (w, h) = (c.width, c.height);
        let plane = w * h;
        let pad = c.pad as f64;
        let mut voxel_row: HashMap<usize, usize> = HashMap::new();
        let mut time_row: HashMap<usize, usize> = HashMap::new();
        let mut pair_row: HashMap<(usize, usize), usize> = HashMap::new();
        let mut plan = RayPlan {
            rays: 0,
            voxels: Vec::new(),
            times: Vec::new(),
            pair_voxel: Vec::new(),
            pair_time: Vec::new(),
            pair_static: Vec::new(),
            samples: Arc::new(SparseMap::new(0)),
        };
        let mut entries: Vec<Vec<(usize, R)>> = Vec::new();
        for q in rays {
            ensure_time(model, q.t)?;
            plan.rays += 1;
            let tr = *time_row.entry(q.t).or_insert_with(|| {
                plan.times.push(q.t);
                plan.times.len() - 1
            });
            let ray = RefRay::new(&pixel_ray(q.camera, q.pixel, q.t as u32), &model.reference);
            for (d, &depth) in model.planes.depths.iter().enumerate() {
                let mut row = Vec::with_capacity(4);
                let taps = ray
                    .sample(&model.reference, depth)
                    .and_then(|(u, v)| bilinear_taps(u + pad, v + pad, w, h));
                for (i, wt) in taps.into_iter().flatten() {
                    if wt == 0.0 {
                        continue;
                    }
                    let vox = d * plane + i;
                    let vr = *voxel_row.entry(vox).or_insert_with(|| {
                        plan.voxels.push(vox);
                        plan.voxels.len() - 1
                    });
                    let pr = *pair_row.entry((vox, q.t)).or_insert_with(|| {
                        plan.pair_voxel.push(vr);
                        plan.pair_time.push(tr);
                        plan.pair_static.push(c.static_plane_of(d + 1) * plane + i);
                        plan.pair_voxel.len() - 1
                    });
                    row.push((pr, R::of(wt)));
                }
                entries.push(row);
            }
        }
        let mut map = SparseMap::new(plan.pair_voxel.len());
        for row in &entries {
            map.push_row(row);
        }
        plan.samples = Arc::new(map);
        Ok(plan)
    }

    pub fn pairs(&self) -> usize {
        self.pair_voxel.len()
    }

    /// Records the render on `tape`; the result is `rays x 3`.
    pub fn record(&self, tape: &mut Tape<R>, model: &TemporalMpiModel<R>) -> Result<Var> {
        let (store, p) = (&model.store, &model.params);
        let n = model.config.basis;
        let x = tape.constant(model.encode_voxels(&self.voxels));
        let coeff_c = p.coeff_color.forward(tape, store, x)?;
        let coeff_a = p.coeff_alpha.forward(tape, store, x)?;
        let table = tape.param(store, p.time_embedding);
        let emb = tape.gather_rows(table, self.times.iter().map(|t| t - 1).collect())?;
        let basis_c = p.basis_color.forward(tape, store, emb)?;
        let basis_a = p.basis_alpha.forward(tape, store, emb)?;

        let cc = tape.gather_rows(coeff_c, self.pair_voxel.clone())?;
        let bc = tape.gather_rows(basis_c, self.pair_time.clone())?;
        let prod = tape.mul(cc, bc)?;
        let dynamic = tape.group_sum(prod, n)?;
        let k0 = tape.param(store, p.static_color);
        let k0 = tape.gather_rows(k0, self.pair_static.clone())?;
        let raw_color = tape.add(dynamic, k0)?;
        let color = tape.sigmoid(raw_color);

        let ca = tape.gather_rows(coeff_a, self.pair_voxel.clone())?;
        let ba = tape.gather_rows(basis_a, self.pair_time.clone())?;
        let prod = tape.mul(ca, ba)?;
        let raw_alpha = tape.group_sum(prod, n)?;
        let alpha = tape.sigmoid(raw_alpha);

        let colors = tape.sparse_rows(color, self.samples.clone())?;
        let alphas = tape.sparse_rows(alpha, self.samples.clone())?;
        tape.composite(colors, alphas, model.config.planes)
    }
}

fn ensure_time<R: Real>(model: &TemporalMpiModel<R>, t: usize) -> Result<()> {
    crate::error::ensure!(
        (1..=model.config.timestamps).contains(&t),
        Contract,
        "timestamp {t} outside [1, {}]",
        model.config.timestamps
    );
    Ok(())
}

/// Renders rays without keeping gradients.
pub fn render_rays<'a, R: Real>(
    model: &TemporalMpiModel<R>,
    rays: impl IntoIterator<Item = RayQuery<'a>>,
) -> Result<Vec<[R; 3]>> {
    let plan = RayPlan::new(model, rays)?;
    let mut tape = Tape::new();
    let out = plan.record(&mut tape, model)?;
    Ok(tape
        .value(out)
        .as_slice()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}
