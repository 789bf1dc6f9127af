//! The `tmpi` command line.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use temporal_mpi::dataio::{synth_scene, Dataset, SyntheticSceneSpec};
use temporal_mpi::diffcore::Checkpoint;
use temporal_mpi::geometry::{Camera, CameraJson};
use temporal_mpi::temporal_field::{bench_bake, BakeHeader, BakedCoefficients, ModelConfig};
use temporal_mpi::training::{evaluate, fit_model_config, EvalReport, RunOutput, TrainConfig, Trainer};

use crate::state::{ServeState, DEFAULT_CACHE_SIZE};

#[derive(Debug, Parser)]
#[command(name = "tmpi", version, about = "Temporal multi-plane image pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene (a spec JSON file, or `desk` / `desk:<T>`).
    Synth { spec: String, out: PathBuf },
    /// Train on a dataset; writes checkpoint.tmpi and metrics.jsonl to <out>.
    Train {
        manifest: PathBuf,
        /// JSON with optional `model` and `train` sections.
        config: PathBuf,
        out: PathBuf,
        /// Continue from <out>/checkpoint.tmpi.
        #[arg(long)]
        resume: bool,
    },
    /// Materialize a checkpoint's coefficient volumes.
    Bake { checkpoint: PathBuf, out: PathBuf },
    /// Render one view of a baked scene to PNG.
    Render {
        baked: PathBuf,
        #[arg(long)]
        t: usize,
        /// Target camera as JSON.
        #[arg(long)]
        camera_json: PathBuf,
        out: PathBuf,
    },
    /// Held-out PSNR/SSIM of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Camera to score; defaults to every held-out camera.
        #[arg(long)]
        camera: Option<String>,
        /// Also write the reports as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time bakes; prints CSV rows `H,W,D,N_basis,ms`.
    BenchBake {
        baked: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also time random volumes with these `D:N_basis` pairs at the
        /// same plane size.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<String>,
    },
    /// Serve scene metadata, plane stacks and renders over HTTP.
    Serve {
        baked: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = DEFAULT_CACHE_SIZE)]
        cache_size: usize,
    },
}

/// Training configuration file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Train {
            manifest,
            config,
            out,
            resume,
        } => train(&manifest, &config, &out, resume),
        Command::Bake { checkpoint, out } => {
            let trainer = load_trainer(&checkpoint)?;
            let baked = trainer.model.bake_coefficient_volume()?;
            baked.save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Render {
            baked,
            t,
            camera_json,
            out,
        } => render(&baked, t, &camera_json, &out),
        Command::Eval {
            checkpoint,
            manifest,
            camera,
            out,
        } => eval(&checkpoint, &manifest, camera, out.as_deref()),
        Command::BenchBake { baked, repeats, sweep } => {
            let baked = BakedCoefficients::load(&baked)?;
            let stdout = std::io::stdout();
            bench(&baked, repeats, &sweep, &mut stdout.lock())
        }
        Command::Serve {
            baked,
            port,
            bind,
            cache_size,
        } => {
            let baked = BakedCoefficients::load(&baked)?;
            let state = Arc::new(ServeState::new(baked, cache_size));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(state, SocketAddr::new(bind, port)))
        }
    }
}

fn synth(spec: &str, out: &Path) -> Result<()> {
    let spec = match spec.strip_prefix("desk") {
        Some("") => SyntheticSceneSpec::desk(8, 8)?,
        Some(rest) if rest.starts_with(':') => {
            let t: usize = rest[1..].parse().context("desk:<T> needs an integer T")?;
            SyntheticSceneSpec::desk(t, 8)?
        }
        _ => {
            let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scene spec {spec}"))?
        }
    };
    let manifest = synth_scene(&spec, out)?;
    println!(
        "wrote {} frames of {} cameras to {}",
        manifest.frames.len(),
        manifest.cameras.len(),
        out.display()
    );
    Ok(())
}

fn train(manifest: &Path, config: &Path, out: &Path, resume: bool) -> Result<()> {
    let data = Dataset::load(manifest)?;
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let output = RunOutput::in_dir(out)?;
    let mut trainer = if resume {
        load_trainer(&output.checkpoint)?
    } else {
        let model_cfg = fit_model_config(cfg.model, &data);
        let planes = data.manifest.plane_set(model_cfg.planes)?;
        let model = temporal_mpi::temporal_field::TemporalMpiModel::new(
            model_cfg,
            planes,
            data.reference_camera().clone(),
            cfg.train.seed,
        )?;
        Trainer::new(model, cfg.train)?
    };
    let steps = trainer.config.total_steps(&data);
    trainer.run(&data, steps, Some(&output))?;
    println!("trained to step {}; checkpoint {}", trainer.step, output.checkpoint.display());
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    Ok(Trainer::from_checkpoint(ckpt)?)
}

fn render(baked: &Path, t: usize, camera_json: &Path, out: &Path) -> Result<()> {
    let baked = BakedCoefficients::load(baked)?;
    let tmax = baked.header.timestamps;
    if !(1..=tmax).contains(&t) {
        bail!("t={t} is outside the valid range [1, {tmax}]");
    }
    let text = fs::read_to_string(camera_json).with_context(|| format!("reading {}", camera_json.display()))?;
    let camera = Camera::try_from(serde_json::from_str::<CameraJson>(&text)?)?;
    let img = baked
        .bake_time_instance(t)?
        .render_view(&baked.header.reference, &camera)?;
    img.save_png(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, camera: Option<String>, out: Option<&Path>) -> Result<()> {
    let trainer = load_trainer(checkpoint)?;
    let data = Dataset::load(manifest)?;
    let cameras = match camera {
        Some(c) => vec![c],
        None => data.manifest.held_out.clone(),
    };
    if cameras.is_empty() {
        bail!("dataset has no held-out camera; pass --camera");
    }
    let reports: Vec<EvalReport> = cameras
        .iter()
        .map(|c| evaluate(&trainer.model, &data, c))
        .collect::<temporal_mpi::Result<_>>()?;
    for r in &reports {
        println!("{}: psnr {:.3} dB, ssim {:.4}", r.camera, r.mean_psnr(), r.mean_ssim());
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&reports)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// One `H,W,D,N_basis,ms` row per timed volume, header first.
pub fn bench(baked: &BakedCoefficients, repeats: usize, sweep: &[String], out: &mut impl Write) -> Result<()> {
    writeln!(out, "H,W,D,N_basis,ms")?;
    let row = |b: &BakedCoefficients, out: &mut dyn Write| -> Result<()> {
        let d = bench_bake(b, 1, repeats)?;
        let h = &b.header;
        writeln!(
            out,
            "{},{},{},{},{:.3}",
            h.height,
            h.width,
            h.planes,
            h.basis,
            d.as_secs_f64() * 1e3
        )?;
        Ok(())
    };
    row(baked, out)?;
    for item in sweep {
        let (d, n) = item
            .split_once(':')
            .and_then(|(d, n)| Some((d.parse::<usize>().ok()?, n.parse::<usize>().ok()?)))
            .with_context(|| format!("sweep entry {item:?} is not D:N_basis"))?;
        let header = resized(&baked.header, d, n)?;
        row(&BakedCoefficients::random(header, 1)?, out)?;
    }
    Ok(())
}

fn resized(h: &BakeHeader, planes: usize, basis: usize) -> Result<BakeHeader> {
    let set = temporal_mpi::geometry::make_planes(h.near, h.far, planes)?;
    let repeat = if planes.is_multiple_of(h.static_repeat) { h.static_repeat } else { 1 };
    Ok(BakeHeader {
        planes,
        basis,
        depths: set.depths,
        static_repeat: repeat,
        ..h.clone()
    })
}
