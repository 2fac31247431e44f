//! Command-line driver. Every subcommand writes into an output directory and
//! appends JSON lines to `log.jsonl` there.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::extract::{extract, to_oriented_points, ExtractConfig};
use crate::io::{self, Settings};
use crate::metrics::{evaluate, EvalConfig};
use crate::synth::{build_scene, SceneKind, SceneSettings};
use crate::train::{init_cloud, InitMode, Trainer};
use crate::{Edge, Gaussian, OrientedPoint, Real};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const THREADS_ENV: &str = "EDGEGS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "edgegs", version, about = "3D edge reconstruction from multi-view edge maps with oriented Gaussians")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene into the dataset layout.
    Synth(SynthArgs),
    /// Fit edge Gaussians to a dataset.
    Train(TrainArgs),
    /// Cluster a trained cloud and fit parametric edges.
    Extract(ExtractArgs),
    /// Score predicted edges against ground truth.
    Eval(EvalArgs),
    /// Train, extract and (when ground truth exists) evaluate.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// cube, mixed or helix.
    #[arg(long, default_value = "cube")]
    pub kind: SceneKind,
    #[arg(long, default_value_t = 50)]
    pub views: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOpts {
    /// object or scene.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Key-value config file, applied after the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args, Clone)]
pub struct ExtractOpts {
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: ExtractOpts,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Dataset directory. Without it a synthetic scene of `--kind` is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "cube")]
    pub kind: SceneKind,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub extract: ExtractOpts,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::Collapsed(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

struct RunLog {
    file: fs::File,
    start: Instant,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    fn event(&mut self, stage: &str, event: &str, data: Value) -> Result<()> {
        let line = json!({
            "stage": stage,
            "event": event,
            "elapsed_s": self.start.elapsed().as_secs_f64(),
            "data": data,
        });
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            log::error!("{}", f.message);
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not set thread count: {e}");
            }
        }
        _ => log::warn!("ignoring {THREADS_ENV}={v:?}"),
    }
}

pub fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth(a) => synth(&a)?,
        Command::Train(a) => {
            let mut log = RunLog::open(&a.out)?;
            let settings = train_settings(&a.opts)?;
            train_stage(&a.data, &a.out, &settings, &mut log)?;
        }
        Command::Extract(a) => {
            let mut log = RunLog::open(&a.out)?;
            let base = match &a.config {
                Some(p) => io::load_config(p, Settings::default())?,
                None => Settings::default(),
            };
            let cfg = extract_settings(base.extract, &a.opts)?;
            let ckpt = io::read_checkpoint(&a.checkpoint)?;
            extract_stage(&ckpt.cloud::<Real>(), &a.out, &cfg, &mut log)?;
        }
        Command::Eval(a) => {
            let mut log = RunLog::open(&a.out)?;
            let pred = io::read_edges(&a.pred)?;
            let gt = io::read_edges(&a.gt)?;
            eval_stage(&pred, &gt, &a.out, &mut log)?;
        }
        Command::Pipeline(a) => pipeline(&a)?,
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut log = RunLog::open(&a.out)?;
    let settings = SceneSettings {
        views: a.views,
        image_size: a.size,
        focal: SceneSettings::default().focal * a.size as f64 / 256.0,
        ..SceneSettings::default()
    };
    let scene = build_scene::<Real>(a.kind, a.scene_seed, &settings)?;
    io::write_dataset(&a.out, &scene.cameras, Some(&scene.gt_edges))?;
    log.event(
        "synth",
        "done",
        json!({"kind": a.kind.name(), "views": a.views, "size": a.size, "gt_edges": scene.gt_edges.len()}),
    )?;
    log::info!("wrote {} views of {} to {}", a.views, a.kind.name(), a.out.display());
    Ok(())
}

fn train_settings(opts: &TrainOpts) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(p) = &opts.preset {
        s.train = crate::train::TrainConfig::preset(p)?;
    }
    if let Some(path) = &opts.config {
        s = io::load_config(path, s)?;
    }
    if let Some(seed) = opts.seed {
        s.train.seed = seed;
    }
    if let Some(epochs) = opts.epochs {
        let t = &mut s.train;
        if epochs <= t.regularizer_start_epoch {
            // shrink the phase boundaries with the run so every phase still occurs
            t.position_only_epochs = t.position_only_epochs * epochs / t.epochs;
            t.regularizer_start_epoch = (t.regularizer_start_epoch * epochs / t.epochs).max(t.position_only_epochs + 1);
        }
        t.epochs = epochs;
    }
    s.train.validate()?;
    Ok(s)
}

fn extract_settings(base: ExtractConfig, opts: &ExtractOpts) -> Result<ExtractConfig> {
    let mut cfg = base;
    if let Some(t) = opts.theta {
        cfg.theta = t;
    }
    if let Some(d) = opts.delta {
        cfg.delta = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_stage(data: &Path, out: &Path, s: &Settings, log: &mut RunLog) -> std::result::Result<Vec<Gaussian>, Failure> {
    let ds = io::load_dataset(data)?;
    log.event("train", "loaded", json!({"data": data.display().to_string(), "views": ds.views.len()}))?;
    let cfg = s.train;
    let init = match &ds.init_points {
        Some(p) => InitMode::FromPoints(p),
        None => InitMode::Random {
            n: cfg.init_count,
            min: Vector3::repeat(-0.5),
            max: Vector3::repeat(0.5),
        },
    };
    let cloud = init_cloud(init, &cfg)?;
    log.event("train", "start", json!({"config": cfg, "gaussians": cloud.len()}))?;
    let mut trainer = Trainer::new(&ds.views, cloud, cfg)?;
    while !trainer.is_done() {
        if let Err(e) = trainer.run_epoch() {
            let path = out.join("failure_checkpoint.json");
            io::write_checkpoint(&path, &trainer.checkpoint())?;
            log.event("train", "failed", json!({"error": e.to_string(), "checkpoint": path.display().to_string()}))?;
            return Err(e.into());
        }
        let rec = trainer.report().epochs.last().expect("epoch recorded");
        log.event("train", "epoch", json!(rec))?;
        log::info!(
            "epoch {} proj {:.5} orient {:.5} shape {:.5} gaussians {}",
            rec.epoch,
            rec.proj,
            rec.orient,
            rec.shape,
            rec.gaussians
        );
    }
    io::write_checkpoint(&out.join("checkpoint.json"), &trainer.checkpoint())?;
    io::write_train_report(&out.join("train_report.json"), trainer.report())?;
    let (cloud, report) = trainer.into_parts();
    let pts: Vec<OrientedPoint> = cloud
        .iter()
        .map(|g| OrientedPoint {
            position: g.mean,
            direction: g.principal_direction(),
        })
        .collect();
    io::write_ply(&out.join("gaussians.ply"), &pts)?;
    log.event(
        "train",
        "done",
        json!({"gaussians": cloud.len(), "initial_proj": report.initial_proj(), "final_proj": report.final_proj()}),
    )?;
    Ok(cloud)
}

fn extract_stage(cloud: &[Gaussian], out: &Path, cfg: &ExtractConfig, log: &mut RunLog) -> Result<Vec<Edge>> {
    let pts = to_oriented_points(cloud, cfg.opacity_filter)?;
    io::write_ply(&out.join("edge_points.ply"), &pts)?;
    let edges = extract(cloud, cfg)?;
    io::write_edges(&out.join("edges.json"), &edges)?;
    let curves = edges.iter().filter(|e| e.kind() == crate::geom::EdgeKind::Curve).count();
    log.event(
        "extract",
        "done",
        json!({"theta": cfg.theta, "delta": cfg.delta, "points": pts.len(), "edges": edges.len(), "curves": curves}),
    )?;
    log::info!("extracted {} edges ({curves} curves) from {} points", edges.len(), pts.len());
    Ok(edges)
}

fn eval_stage(pred: &[Edge], gt: &[Edge], out: &Path, log: &mut RunLog) -> Result<()> {
    let report = evaluate(pred, gt, &EvalConfig::default())?;
    io::write_metrics(&out.join("metrics.json"), &report)?;
    log.event("eval", "done", json!(report))?;
    log::info!("\n{report}");
    Ok(())
}

fn pipeline(a: &PipelineArgs) -> std::result::Result<(), Failure> {
    let mut log = RunLog::open(&a.out)?;
    let data = match &a.data {
        Some(d) => d.clone(),
        None => {
            let dir = a.out.join("data");
            let scene = build_scene::<Real>(a.kind, 0, &SceneSettings::default())?;
            io::write_dataset(&dir, &scene.cameras, Some(&scene.gt_edges))?;
            log.event("synth", "done", json!({"kind": a.kind.name(), "views": scene.cameras.len()}))?;
            dir
        }
    };
    let settings = train_settings(&a.train)?;
    let cfg = extract_settings(settings.extract, &a.extract)?;
    let cloud = train_stage(&data, &a.out, &settings, &mut log)?;
    let edges = extract_stage(&cloud, &a.out, &cfg, &mut log)?;
    let gt_path = io::DatasetLayout::new(&data).gt_edges();
    if gt_path.exists() {
        let gt = io::read_edges(&gt_path)?;
        eval_stage(&edges, &gt, &a.out, &mut log)?;
    } else {
        log.event("eval", "skipped", json!({"reason": "no gt_edges.json"}))?;
    }
    Ok(())
}
