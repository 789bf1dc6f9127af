//! Trains on the synthetic desk scene and reports held-out quality.
//!
//! `cargo run --release --example desk -- <steps>`; model and optimizer
//! sizes can be overridden with `DESK_*` environment variables.

use std::time::Instant;

use temporal_mpi::dataio::{synth_scene, Dataset, SyntheticSceneSpec};
use temporal_mpi::temporal_field::ModelConfig;
use temporal_mpi::training::{evaluate, fit_model_config, TrainConfig, Trainer};
use temporal_mpi::temporal_field::TemporalMpiModel;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> temporal_mpi::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let timestamps = env("DESK_T", 8usize);
    let dir = tempfile_dir();
    let spec = SyntheticSceneSpec::desk(timestamps, 8)?;
    synth_scene(&spec, &dir)?;
    let data = Dataset::load(&dir.join("manifest.json"))?;
    let model_config = ModelConfig {
        planes: 8,
        basis: env("DESK_N", 3),
        pe_levels: env("DESK_LEVELS", 6),
        embed_width: 32,
        coeff_layers: env("DESK_LAYERS", 4),
        coeff_hidden: env("DESK_HIDDEN", 64),
        basis_layers: 4,
        basis_hidden: 64,
        static_repeat: 2,
        use_static: env("DESK_STATIC", true),
        use_dynamic: env("DESK_DYNAMIC", true),
        ..ModelConfig::default()
    };
    let mut config = TrainConfig {
        rays_per_batch: env("DESK_RAYS", 4096),
        lambda1: env("DESK_L1", 0.1),
        lambda2: env("DESK_L2", 0.01),
        max_steps: Some(steps),
        seed: 1,
        ..TrainConfig::default()
    };
    config.adam.lr = env("DESK_LR", 1e-3);
    config.adam.decay_interval = env("DESK_DECAY", 2000);
    let model_config = fit_model_config(model_config, &data);
    let planes = data.manifest.plane_set(8)?;
    let model = TemporalMpiModel::<f32>::new(model_config, planes, data.reference_camera().clone(), 1)?;
    let mut trainer = Trainer::new(model, config)?;
    let start = Instant::now();
    let every = env("DESK_EVERY", 100u64);
    while trainer.step < steps {
        let target = (trainer.step + every).min(steps);
        let recs = trainer.run(&data, target, None)?;
        let last = recs.last().unwrap();
        let eval = evaluate(&trainer.model, &data, "cam01")?;
        println!(
            "step {:5} {:7.1}s loss {:.5} train {:.2} held-out {:.2} ssim {:.3}",
            trainer.step,
            start.elapsed().as_secs_f64(),
            last.loss,
            last.train_psnr,
            eval.mean_psnr(),
            eval.mean_ssim()
        );
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tmpi-desk-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
