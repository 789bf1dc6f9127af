//! Patch sampling, the training loop with checkpoints and metrics, and
//! held-out evaluation.

mod loss;
mod metrics;
mod render;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::diffcore::{lr_schedule, AdamConfig, Checkpoint, Gradients, Matrix, Real, SparseMap, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::geometry::Camera;
use crate::imaging::FloatImage;
use crate::temporal_field::{BakedCoefficients, ModelConfig, ModelDescription, TemporalMpiModel};

pub use loss::{diff_map, patch_loss, tv_map, tvc, LossTerms, VolumeView};
pub use metrics::{mse, psnr, psnr_for_log, psnr_from_mse, ssim, PSNR_LOG_CAP};
pub use render::{render_rays, RayPlan, RayQuery};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Pixels per optimizer step; a whole number of patches.
    pub rays_per_batch: usize,
    pub patch_side: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    /// Weight of the image-gradient term.
    pub lambda1: f64,
    /// Weight of the static-volume total variation term.
    pub lambda2: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held-out evaluation every this many steps; 0 disables.
    pub eval_interval: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 937 * 16,
            patch_side: 4,
            epochs: 800,
            max_steps: None,
            lambda1: 0.1,
            lambda2: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_side >= 1, Contract, "patch side must be at least 1");
        let area = self.patch_side * self.patch_side;
        ensure!(
            self.rays_per_batch >= area && self.rays_per_batch.is_multiple_of(area),
            Contract,
            "rays per batch {} is not a positive multiple of the patch area {area}",
            self.rays_per_batch
        );
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0,
            Contract,
            "loss weights must be non-negative"
        );
        ensure!(
            self.lambda1 == 0.0 || self.patch_side >= 2,
            Contract,
            "the gradient term needs patches of side at least 2"
        );
        self.adam.validate()
    }

    pub fn patches_per_batch(&self) -> usize {
        self.rays_per_batch / (self.patch_side * self.patch_side)
    }

    /// Steps in one pass over the training pixels.
    pub fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        let m = &data.manifest;
        let frames: usize = m
            .train_indices()
            .iter()
            .map(|&k| (1..=m.timestamps).filter(|&t| data.frame(t, k).is_some()).count())
            .sum();
        let pixels = frames * m.width as usize * m.height as usize;
        (pixels as u64).div_ceil(self.rays_per_batch as u64).max(1)
    }

    pub fn total_steps(&self, data: &Dataset) -> u64 {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(data))
    }
}

/// A square block of ground-truth pixels from one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Index into the dataset's camera list.
    pub camera: usize,
    pub t: usize,
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    /// `side * side` RGB values, row-major.
    pub gt: Vec<f32>,
}

impl Patch {
    pub fn pixels(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.side).flat_map(move |y| (0..self.side).map(move |x| ((self.x0 + x) as f64, (self.y0 + y) as f64)))
    }

    pub fn rays<'a>(&'a self, cameras: &'a [Camera]) -> impl Iterator<Item = RayQuery<'a>> + 'a {
        let camera = &cameras[self.camera];
        self.pixels().map(move |pixel| RayQuery {
            camera,
            pixel,
            t: self.t,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub side: usize,
    pub patches: Vec<Patch>,
}

impl RayBatch {
    pub fn rays(&self) -> usize {
        self.patches.len() * self.side * self.side
    }

    pub fn ray_queries<'a>(&'a self, cameras: &'a [Camera]) -> impl Iterator<Item = RayQuery<'a>> + 'a {
        self.patches.iter().flat_map(move |p| p.rays(cameras))
    }

    fn gt_matrix<R: Real>(&self) -> Result<Matrix<R>> {
        let data = self.patches.iter().flat_map(|p| p.gt.iter().map(|&v| R::of(v as f64))).collect();
        Matrix::from_vec(self.rays(), 3, data)
    }
}

/// Draws whole patches uniformly over training camera, timestamp (among
/// frames that exist) and position.
pub fn sample_patches(data: &Dataset, config: &TrainConfig, rng: &mut impl Rng) -> Result<RayBatch> {
    config.validate()?;
    let m = &data.manifest;
    let side = config.patch_side;
    ensure!(
        side <= m.width as usize && side <= m.height as usize,
        Contract,
        "patch side {side} exceeds the {}x{} images",
        m.width,
        m.height
    );
    let train = m.train_indices();
    let available: Vec<(usize, usize)> = train
        .iter()
        .flat_map(|&k| (1..=m.timestamps).map(move |t| (k, t)))
        .filter(|&(k, t)| data.frame(t, k).is_some())
        .collect();
    ensure!(!available.is_empty(), Contract, "dataset has no training frames");
    let mut patches = Vec::with_capacity(config.patches_per_batch());
    for _ in 0..config.patches_per_batch() {
        let (k, t) = loop {
            let k = train[rng.gen_range(0..train.len())];
            let t = rng.gen_range(1..=m.timestamps);
            if data.frame(t, k).is_some() {
                break (k, t);
            }
        };
        let x0 = rng.gen_range(0..=m.width as usize - side);
        let y0 = rng.gen_range(0..=m.height as usize - side);
        let img = data.frame(t, k).expect("checked above");
        let mut gt = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                gt.extend_from_slice(img.pixel(x, y));
            }
        }
        patches.push(Patch {
            camera: k,
            t,
            x0,
            y0,
            side,
            gt,
        });
    }
    Ok(RayBatch { side, patches })
}

/// The model's prediction for the pixels of `patch` (row-major).
pub fn render_patch<R: Real>(model: &TemporalMpiModel<R>, cameras: &[Camera], patch: &Patch) -> Result<Vec<[R; 3]>> {
    ensure!(patch.camera < cameras.len(), Contract, "patch camera {} not in the rig", patch.camera);
    render_rays(model, patch.rays(cameras))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l2: f64,
    pub grad_l1: f64,
    pub tvc: f64,
    /// PSNR of the batch against its ground truth.
    pub train_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: f64,
    pub step: u64,
    pub camera: String,
    pub t: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Append-only JSON-lines writer.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("metrics log", e))
    }
}

/// Loss graph handles.
pub struct Objective {
    pub total: Var,
    pub l2: Var,
    pub grad_l1: Var,
    pub tvc: Var,
    pub pred: Var,
}

/// Optimizer state around a model.
#[derive(Clone, Debug)]
pub struct Trainer<R> {
    pub model: TemporalMpiModel<R>,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    tv: Arc<SparseMap<R>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelDescription,
    train: TrainConfig,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: TemporalMpiModel<R>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let c = &model.config;
        let tv = Arc::new(tv_map(c.static_planes(), c.height, c.width));
        Ok(Self {
            model,
            config,
            step: 0,
            tv,
        })
    }

    /// Records render and loss for `batch` on `tape`.
    pub fn record(&self, tape: &mut Tape<R>, cameras: &[Camera], batch: &RayBatch) -> Result<Objective> {
        ensure!(!batch.patches.is_empty(), Contract, "empty batch");
        ensure!(
            self.config.lambda1 == 0.0 || batch.side >= 2,
            Contract,
            "the gradient term needs patches of side at least 2"
        );
        let plan = RayPlan::new(&self.model, batch.ray_queries(cameras))?;
        let pred = plan.record(tape, &self.model)?;
        let gt = tape.constant(batch.gt_matrix()?);
        let err = tape.sub(pred, gt)?;
        let sq = tape.mul(err, err)?;
        let l2 = tape.mean(sq);
        let grad_l1 = if batch.side >= 2 {
            let d = tape.sparse_rows(err, Arc::new(diff_map(batch.patches.len(), batch.side)))?;
            let d = tape.abs(d);
            tape.mean(d)
        } else {
            tape.constant(Matrix::scalar(R::zero()))
        };
        let k0 = tape.param(&self.model.store, self.model.params.static_color);
        let dk = tape.sparse_rows(k0, self.tv.clone())?;
        let dk = tape.abs(dk);
        let tvc = tape.mean(dk);
        let a = tape.scale(grad_l1, R::of(self.config.lambda1));
        let b = tape.scale(tvc, R::of(self.config.lambda2));
        let total = tape.add(l2, a)?;
        let total = tape.add(total, b)?;
        Ok(Objective {
            total,
            l2,
            grad_l1,
            tvc,
            pred,
        })
    }

    fn terms(tape: &Tape<R>, obj: &Objective) -> LossTerms {
        LossTerms {
            total: tape.scalar(obj.total).f64(),
            l2: tape.scalar(obj.l2).f64(),
            grad_l1: tape.scalar(obj.grad_l1).f64(),
            tvc: tape.scalar(obj.tvc).f64(),
        }
    }

    pub fn loss(&self, cameras: &[Camera], batch: &RayBatch) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let obj = self.record(&mut tape, cameras, batch)?;
        Ok(Self::terms(&tape, &obj))
    }

    pub fn gradients(&self, cameras: &[Camera], batch: &RayBatch) -> Result<(LossTerms, Gradients<R>)> {
        let mut tape = Tape::new();
        let obj = self.record(&mut tape, cameras, batch)?;
        let terms = Self::terms(&tape, &obj);
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {}", terms.total, self.step)));
        }
        Ok((terms, tape.backward(obj.total)?))
    }

    /// The batch drawn at `step`; independent of how the run got there.
    pub fn batch_for_step(&self, data: &Dataset, step: u64) -> Result<RayBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        sample_patches(data, &self.config, &mut rng)
    }

    /// One sample/render/loss/backward/Adam cycle. On a non-finite loss the
    /// model is left untouched and an error is returned.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let batch = self.batch_for_step(data, self.step)?;
        let (terms, grads) = self.gradients(&data.cameras, &batch)?;
        self.model.store.accumulate(&grads, R::one());
        self.model.store.adam_step(&self.config.adam, self.step)?;
        let record = StepRecord {
            step: self.step,
            lr: lr_schedule(self.step, &self.config.adam),
            loss: terms.total,
            l2: terms.l2,
            grad_l1: terms.grad_l1,
            tvc: terms.tvc,
            train_psnr: psnr_for_log(psnr_from_mse(terms.l2)),
        };
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<R>> {
        let config = serde_json::to_value(CheckpointConfig {
            model: self.model.description(),
            train: self.config.clone(),
        })?;
        Ok(Checkpoint {
            step: self.step,
            config,
            store: self.model.store.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<R>) -> Result<Self> {
        let cfg: CheckpointConfig = serde_json::from_value(ckpt.config)
            .map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
        let model = TemporalMpiModel::from_parts(cfg.model, ckpt.store)?;
        let mut trainer = Self::new(model, cfg.train)?;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    /// Writes the checkpoint atomically so an interrupted write never
    /// replaces the last good file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        self.checkpoint()?.save(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Trains until `self.step == until`, logging every step and evaluating
    /// and checkpointing at the configured intervals.
    pub fn run(&mut self, data: &Dataset, until: u64, out: Option<&RunOutput>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(o) => Some(MetricsLog::open(&o.metrics)?),
            None => None,
        };
        let per_epoch = self.config.steps_per_epoch(data);
        let mut records = Vec::new();
        while self.step < until {
            let r = self.step(data)?;
            if r.step % 100 == 0 {
                info!("step {} loss {:.6} train psnr {:.2}", r.step, r.loss, r.train_psnr);
            }
            if let Some(log) = log.as_mut() {
                log.write(&MetricsRecord::Step(r.clone()))?;
            }
            records.push(r);
            if let Some(o) = out {
                let every = self.config.checkpoint_interval;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.save_checkpoint(&o.checkpoint)?;
                }
            }
            let every = self.config.eval_interval;
            if every > 0 && self.step.is_multiple_of(every) {
                for cam in data.manifest.held_out.clone() {
                    let report = evaluate(&self.model, data, &cam)?;
                    info!("step {} held-out {cam}: psnr {:.2}", self.step, report.mean_psnr());
                    if let Some(log) = log.as_mut() {
                        log.write(&MetricsRecord::Eval(report.record(self.step, per_epoch)))?;
                    }
                }
            }
        }
        if let Some(o) = out {
            self.save_checkpoint(&o.checkpoint)?;
        }
        Ok(records)
    }
}

/// Where a run writes its checkpoint and metrics log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunOutput {
    pub fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            checkpoint: dir.join("checkpoint.tmpi"),
            metrics: dir.join("metrics.jsonl"),
        })
    }
}

/// Fits the spatial and temporal extent of `config` to a dataset.
pub fn fit_model_config(mut config: ModelConfig, data: &Dataset) -> ModelConfig {
    let m = &data.manifest;
    config.timestamps = m.timestamps;
    config.width = m.width as usize + 2 * config.pad;
    config.height = m.height as usize + 2 * config.pad;
    config
}

/// Builds a fresh model for `data` and trains it for the configured number
/// of steps.
pub fn train(
    data: &Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    out: Option<&RunOutput>,
) -> Result<Trainer<f32>> {
    let model_config = fit_model_config(model_config, data);
    let planes = data.manifest.plane_set(model_config.planes)?;
    let model = TemporalMpiModel::new(model_config, planes, data.reference_camera().clone(), config.seed)?;
    let mut trainer = Trainer::new(model, config)?;
    let steps = trainer.config.total_steps(data);
    info!("training for {steps} steps ({} per epoch)", trainer.config.steps_per_epoch(data));
    trainer.run(data, steps, out)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub t: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub camera: String,
    pub frames: Vec<FrameScore>,
    /// Timestamps with no ground truth.
    pub skipped: Vec<usize>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    fn record(&self, step: u64, steps_per_epoch: u64) -> EvalRecord {
        EvalRecord {
            epoch: step as f64 / steps_per_epoch as f64,
            step,
            camera: self.camera.clone(),
            t: self.frames.iter().map(|f| f.t).collect(),
            psnr: self.frames.iter().map(|f| psnr_for_log(f.psnr)).collect(),
            ssim: self.frames.iter().map(|f| f.ssim).collect(),
        }
    }
}

/// Scores the baked model at every timestamp from camera `camera_id`.
pub fn evaluate<R: Real>(model: &TemporalMpiModel<R>, data: &Dataset, camera_id: &str) -> Result<EvalReport> {
    let baked = BakedCoefficients::from_model(model)?;
    evaluate_baked(&baked, &model.reference, data, camera_id)
}

pub fn evaluate_baked(
    baked: &BakedCoefficients,
    reference: &Camera,
    data: &Dataset,
    camera_id: &str,
) -> Result<EvalReport> {
    let k = data
        .manifest
        .camera_index(camera_id)
        .ok_or_else(|| Error::Contract(format!("camera {camera_id:?} is not in the dataset")))?;
    let target = &data.cameras[k];
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for t in 1..=data.manifest.timestamps {
        let Some(gt) = data.frame(t, k) else {
            warn!("no ground truth for (t={t}, camera={camera_id}); skipped");
            skipped.push(t);
            continue;
        };
        let img: FloatImage = baked.bake_time_instance(t)?.render_view(reference, target)?;
        frames.push(FrameScore {
            t,
            psnr: psnr(&img, gt)?,
            ssim: ssim(&img, gt)?,
        });
    }
    Ok(EvalReport {
        camera: camera_id.to_string(),
        frames,
        skipped,
    })
}
