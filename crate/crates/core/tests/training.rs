mod common;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use temporal_mpi::dataio::{synth_scene, Dataset, FrameKey, Motion, Primitive, RigSpec, Shape, SyntheticSceneSpec, Texture};
use temporal_mpi::diffcore::{Checkpoint, Matrix};
use temporal_mpi::temporal_field::{BakedCoefficients, ModelConfig, TemporalMpiModel};
use temporal_mpi::training::{
    evaluate, render_patch, sample_patches, MetricsRecord, Patch, RunOutput, TrainConfig, Trainer,
};
use temporal_mpi::Error;

use common::{model_for, randomize_static, small_dataset, small_model_config};

fn small_train_config() -> TrainConfig {
    TrainConfig {
        rays_per_batch: 64,
        patch_side: 4,
        max_steps: Some(4),
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn patch_render_equals_baked_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 2);
    let mut model: TemporalMpiModel<f32> = model_for(&data, small_model_config(), 5);
    randomize_static(&mut model, 6);
    let baked = BakedCoefficients::from_model(&model).unwrap();
    for (k, cam) in data.cameras.iter().enumerate() {
        for t in 1..=2 {
            let full = baked.bake_time_instance(t).unwrap().render_view(&model.reference, cam).unwrap();
            for (x0, y0) in [(0, 0), (12, 8), (5, 3)] {
                let patch = Patch {
                    camera: k,
                    t,
                    x0,
                    y0,
                    side: 4,
                    gt: vec![0.0; 48],
                };
                let pred = render_patch(&model, &data.cameras, &patch).unwrap();
                for (i, (x, y)) in patch.pixels().enumerate() {
                    let want = full.pixel(x as usize, y as usize);
                    for c in 0..3 {
                        assert!(
                            (pred[i][c] - want[c]).abs() <= 1e-5,
                            "camera {k} t {t} pixel ({x},{y}): {} vs {}",
                            pred[i][c],
                            want[c]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn opaque_constant_volume_renders_its_color() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 2);
    let config = temporal_mpi::training::fit_model_config(small_model_config(), &data);
    let planes = data.manifest.plane_set(config.planes).unwrap();
    let mut model = TemporalMpiModel::<f64>::zeros(config, planes, data.reference_camera().clone()).unwrap();
    let raw = [0.3f64, -1.0, 2.0];
    for (i, v) in model.store.value_mut(model.params.static_color).iter_mut().enumerate() {
        *v = raw[i % 3];
    }
    // Alpha logit 40 * 1 on every texel and time: opaque everywhere.
    let (_, last_a) = *model.params.coeff_alpha.layers.last().unwrap();
    model.store.value_mut(last_a).iter_mut().for_each(|v| *v = 40.0);
    let (_, last_b) = *model.params.basis_alpha.layers.last().unwrap();
    model.store.value_mut(last_b).iter_mut().for_each(|v| *v = 1.0);
    let want = raw.map(|r| 1.0 / (1.0 + (-r).exp()));
    let patch = Patch {
        camera: 1,
        t: 2,
        x0: 6,
        y0: 4,
        side: 4,
        gt: vec![0.0; 48],
    };
    for px in render_patch(&model, &data.cameras, &patch).unwrap() {
        for c in 0..3 {
            assert!((px[c] - want[c]).abs() < 1e-12, "{px:?} vs {want:?}");
        }
    }
}

#[test]
fn patch_sampling_is_deterministic_and_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec::desk(8, 8).unwrap();
    synth_scene(&spec, dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("manifest.json")).unwrap();
    let config = TrainConfig {
        rays_per_batch: 256 * 16,
        ..TrainConfig::default()
    };
    let draw = |seed: u64| sample_patches(&data, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));

    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut total = 0;
    for _ in 0..40 {
        let batch = sample_patches(&data, &config, &mut rng).unwrap();
        assert_eq!(batch.rays(), 4096);
        for p in &batch.patches {
            assert!(p.x0 + 4 <= 96 && p.y0 + 4 <= 64);
            assert_ne!(p.camera, 1, "held-out camera sampled");
            *counts.entry((p.camera, p.t)).or_default() += 1;
            total += 1;
        }
    }
    let pairs = 4 * 8;
    assert_eq!(counts.len(), pairs);
    let p = 1.0 / pairs as f64;
    let expected = total as f64 * p;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for (&pair, &n) in &counts {
        assert!((n as f64 - expected).abs() <= 3.0 * sigma, "{pair:?}: {n} vs {expected}");
        chi2 += (n as f64 - expected).powi(2) / expected;
    }
    // 99.9th percentile of chi-squared with 31 degrees of freedom.
    assert!(chi2 < 61.1, "chi2 {chi2}");
}

#[test]
fn patch_larger_than_image_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 1);
    let config = TrainConfig {
        patch_side: 13,
        rays_per_batch: 169,
        ..TrainConfig::default()
    };
    let err = sample_patches(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let bad = TrainConfig {
        rays_per_batch: 100,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let single = TrainConfig {
        patch_side: 1,
        rays_per_batch: 10,
        ..TrainConfig::default()
    };
    assert!(single.validate().is_err(), "gradient term with 1-pixel patches");
    let single = TrainConfig { lambda1: 0.0, ..single };
    single.validate().unwrap();
}

#[test]
fn resumed_run_reproduces_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(&dir.path().join("data"), 2);
    let model: TemporalMpiModel<f32> = model_for(&data, small_model_config(), 8);
    let mut straight = Trainer::new(model.clone(), small_train_config()).unwrap();
    let records = straight.run(&data, 4, None).unwrap();

    let mut first = Trainer::new(model, small_train_config()).unwrap();
    first.run(&data, 2, None).unwrap();
    let path = dir.path().join("ckpt.tmpi");
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::<f32>::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    let rest = resumed.run(&data, 4, None).unwrap();
    assert_eq!(rest[0].loss.to_bits(), records[2].loss.to_bits());
    assert_eq!(rest[1].loss.to_bits(), records[3].loss.to_bits());
    for (a, b) in resumed.model.store.blocks().iter().zip(straight.model.store.blocks()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn single_pixel_fit_converges() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        name: "pixel".into(),
        timestamps: 1,
        width: 1,
        height: 1,
        near: 2.0,
        far: 8.0,
        seed: 0,
        rig: RigSpec {
            count: 1,
            baseline: 0.0,
            focal: 10.0,
            reference: 0,
            held_out: vec![],
        },
        primitives: vec![Primitive {
            depth: 8.0,
            shape: Shape::Full,
            texture: Texture::Constant { rgb: [0.1, 0.8, 0.3] },
            opacity: 1.0,
            motion: Motion::default(),
        }],
    };
    synth_scene(&spec, dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("manifest.json")).unwrap();
    let model_config = ModelConfig {
        basis: 1,
        pad: 1,
        ..small_model_config()
    };
    let model: TemporalMpiModel<f64> = model_for(&data, model_config, 2);
    let config = TrainConfig {
        rays_per_batch: 1,
        patch_side: 1,
        lambda1: 0.0,
        lambda2: 0.0,
        max_steps: Some(200),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let records = trainer.run(&data, 200, None).unwrap();
    let first = records[0].loss;
    let last = records[199].loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    // Trend: each quarter of the run ends lower than it started.
    for q in records.chunks(50) {
        assert!(q.last().unwrap().loss < q[0].loss);
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(&dir.path().join("data"), 2);
    let model: TemporalMpiModel<f32> = model_for(&data, small_model_config(), 8);
    let config = TrainConfig {
        checkpoint_interval: 1,
        ..small_train_config()
    };
    let out = RunOutput::in_dir(&dir.path().join("run")).unwrap();
    let mut trainer = Trainer::new(model, config).unwrap();
    trainer.run(&data, 2, Some(&out)).unwrap();
    let before = trainer.model.store.clone();
    let id = trainer.model.params.time_embedding;
    trainer.model.store.value_mut(id)[0] = f32::NAN;
    let poisoned = trainer.model.store.clone();
    let err = trainer.run(&data, 4, Some(&out)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(trainer.step, 2);
    for (a, b) in trainer.model.store.blocks().iter().zip(poisoned.blocks()) {
        assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let kept = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
    assert_eq!(kept.step, 2);
    assert_eq!(kept.store.blocks()[1].value, before.blocks()[1].value);

    let log = std::fs::read_to_string(&out.metrics).unwrap();
    let recs: Vec<MetricsRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 2);
    for r in recs {
        let MetricsRecord::Step(s) = r else { panic!("unexpected record") };
        assert!(s.loss >= s.l2 && s.lr == 1e-3);
    }
}

#[test]
fn static_perturbation_off_the_batch_only_moves_tv() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 2);
    let mut model: TemporalMpiModel<f64> = model_for(&data, small_model_config(), 4);
    randomize_static(&mut model, 1);
    let trainer = Trainer::new(model, small_train_config()).unwrap();
    let batch = trainer.batch_for_step(&data, 0).unwrap();
    let plan = temporal_mpi::training::RayPlan::new(&trainer.model, batch.ray_queries(&data.cameras)).unwrap();
    let touched: std::collections::HashSet<usize> = plan.pair_static.iter().copied().collect();
    let c = &trainer.model.config;
    let free = (0..c.static_planes() * c.height * c.width)
        .find(|r| !touched.contains(r))
        .expect("an untouched texel");
    let base = trainer.loss(&data.cameras, &batch).unwrap();
    let mut moved = trainer.clone();
    let id = moved.model.params.static_color;
    moved.model.store.value_mut(id)[3 * free] += 0.7;
    let after = moved.loss(&data.cameras, &batch).unwrap();
    assert_eq!(after.l2, base.l2);
    assert_eq!(after.grad_l1, base.grad_l1);
    assert_ne!(after.tvc, base.tvc);
    assert!((after.total - base.total - 0.01 * (after.tvc - base.tvc)).abs() < 1e-15);
}

#[test]
fn evaluation_skips_missing_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_dataset(dir.path(), 2);
    data.frames[1][0] = None;
    data.manifest.frames.retain(|f| !(f.t == 2 && f.camera == "cam00"));
    data.manifest.missing.push(FrameKey {
        t: 2,
        camera: "cam00".into(),
    });
    let model: TemporalMpiModel<f32> = model_for(&data, small_model_config(), 1);
    let report = evaluate(&model, &data, "cam00").unwrap();
    assert_eq!(report.skipped, vec![2]);
    assert_eq!(report.frames.len(), 1);
    assert!(report.frames[0].psnr.is_finite() && report.frames[0].ssim <= 1.0);
    assert!(evaluate(&model, &data, "nope").is_err());
}

#[test]
fn objective_matches_direct_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 2);
    let mut model: TemporalMpiModel<f64> = model_for(&data, small_model_config(), 4);
    randomize_static(&mut model, 2);
    let trainer = Trainer::new(model, small_train_config()).unwrap();
    let batch = trainer.batch_for_step(&data, 1).unwrap();
    let terms = trainer.loss(&data.cameras, &batch).unwrap();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for p in &batch.patches {
        for px in render_patch(&trainer.model, &data.cameras, p).unwrap() {
            pred.extend_from_slice(&px);
        }
        gt.extend(p.gt.iter().map(|&v| v as f64));
    }
    let c = &trainer.model.config;
    let k0 = Matrix::from_vec(
        c.static_planes() * c.height * c.width,
        3,
        trainer.model.store.value(trainer.model.params.static_color).to_vec(),
    )
    .unwrap();
    let direct = temporal_mpi::training::patch_loss(
        &pred,
        &gt,
        4,
        temporal_mpi::training::VolumeView {
            data: k0.as_slice(),
            planes: c.static_planes(),
            height: c.height,
            width: c.width,
            channels: 3,
        },
        0.1,
        0.01,
    )
    .unwrap();
    assert!((terms.total - direct.total).abs() < 1e-12);
    assert!((terms.tvc - direct.tvc).abs() < 1e-12);
}
