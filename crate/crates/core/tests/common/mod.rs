//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use temporal_mpi::dataio::{synth_scene, Dataset, Motion, Primitive, RigSpec, Shape, SyntheticSceneSpec, Texture};
use temporal_mpi::temporal_field::{ModelConfig, TemporalMpiModel};
use temporal_mpi::training::fit_model_config;

/// 16x12 images, three cameras (middle one is the reference, first held
/// out), a textured backdrop and a moving disc.
pub fn small_spec(timestamps: usize) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        name: "small".into(),
        timestamps,
        width: 16,
        height: 12,
        near: 2.0,
        far: 8.0,
        seed: 11,
        rig: RigSpec {
            count: 3,
            baseline: 0.05,
            focal: 20.0,
            reference: 1,
            held_out: vec![0],
        },
        primitives: vec![
            Primitive {
                depth: 8.0,
                shape: Shape::Full,
                texture: Texture::Noise {
                    base: [0.5, 0.45, 0.4],
                    amplitude: 0.3,
                    cell: 0.8,
                    seed: 2,
                },
                opacity: 1.0,
                motion: Motion::default(),
            },
            Primitive {
                depth: 3.0,
                shape: Shape::Disc {
                    center: [0.0, 0.0],
                    radius: 0.4,
                    softness: 0.05,
                },
                texture: Texture::Constant { rgb: [0.9, 0.2, 0.1] },
                opacity: 1.0,
                motion: Motion {
                    start: [-0.2, 0.0],
                    velocity: [0.15, 0.0],
                },
            },
        ],
    }
}

pub fn small_dataset(dir: &Path, timestamps: usize) -> Dataset {
    synth_scene(&small_spec(timestamps), dir).unwrap();
    Dataset::load(&dir.join("manifest.json")).unwrap()
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        planes: 4,
        basis: 2,
        pad: 2,
        pe_levels: 2,
        embed_width: 4,
        coeff_layers: 2,
        coeff_hidden: 8,
        basis_layers: 2,
        basis_hidden: 8,
        static_repeat: 2,
        ..ModelConfig::default()
    }
}

pub fn model_for<R: temporal_mpi::diffcore::Real>(
    data: &Dataset,
    config: ModelConfig,
    seed: u64,
) -> TemporalMpiModel<R> {
    let config = fit_model_config(config, data);
    let planes = data.manifest.plane_set(config.planes).unwrap();
    TemporalMpiModel::new(config, planes, data.reference_camera().clone(), seed).unwrap()
}

/// Fills the static color volume with values in `[-1, 1]` so that it is
/// neither constant nor zero.
pub fn randomize_static<R: temporal_mpi::diffcore::Real>(model: &mut TemporalMpiModel<R>, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let id = model.params.static_color;
    for v in model.store.value_mut(id) {
        *v = R::of(rng.gen_range(-1.0..1.0));
    }
}
