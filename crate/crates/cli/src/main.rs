use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use poleimg::cloud::read_cloud;
use poleimg::detect::{read_detections, write_detections};
use poleimg::encoder::checkpoint::read_checkpoint;
use poleimg::eval::{evaluate_baseline, evaluate_descriptors, read_db, write_db, write_report};
use poleimg::pipeline::{
    embed_images, load_manifest_images, run_detect, run_render, run_repro, run_synth, write_images, write_synth,
    write_training, PipelineConfig,
};
use poleimg::synth::read_ground_truth;
use poleimg::training::{train_with_progress, ObservationSet, Regime};

#[derive(Parser)]
#[command(name = "poleimg", version, about = "Pole-Image place recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-session scene.
    Synth(SynthArgs),
    /// Detect poles in a point cloud.
    Detect(DetectArgs),
    /// Render one Pole-Image per detection.
    Render(RenderArgs),
    /// Train an encoder on a manifest of Pole-Images.
    Train(TrainArgs),
    /// Encode a manifest into a descriptor database.
    Embed(EmbedArgs),
    /// Cross-session retrieval evaluation.
    Eval(EvalArgs),
    /// Full pipeline with a baseline/SL/CL comparison table.
    Repro(ReproArgs),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthFlags {
    /// Number of poles [default: 200]
    #[arg(long)]
    n_poles: Option<usize>,
    /// Number of sessions [default: 2]
    #[arg(long)]
    n_sessions: Option<u32>,
    /// Side of the square area in metres [default: 150]
    #[arg(long)]
    area_side: Option<f64>,
    /// Minimum distance between poles in metres [default: 7]
    #[arg(long)]
    min_pole_separation: Option<f64>,
    /// Surface sampling density in points per square metre [default: 400]
    #[arg(long)]
    points_per_surface_unit: Option<f64>,
    /// Gaussian sensor noise in metres [default: 0.02]
    #[arg(long)]
    sensor_noise_sigma: Option<f64>,
    /// Fraction of clutter points removed per session [default: 0.3]
    #[arg(long)]
    session_dropout: Option<f64>,
    /// Maximum per-session clutter displacement in metres [default: 0.25]
    #[arg(long)]
    session_jitter: Option<f64>,
}

impl SynthFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let s = &mut cfg.synth;
        set(&mut s.n_poles, self.n_poles);
        set(&mut s.n_sessions, self.n_sessions);
        set(&mut s.area_side, self.area_side);
        set(&mut s.min_pole_separation, self.min_pole_separation);
        set(&mut s.points_per_surface_unit, self.points_per_surface_unit);
        set(&mut s.sensor_noise_sigma, self.sensor_noise_sigma);
        set(&mut s.session_dropout, self.session_dropout);
        set(&mut s.session_jitter, self.session_jitter);
    }
}

#[derive(Args)]
struct DetectorFlags {
    /// Grid cell size in metres [default: 0.25]
    #[arg(long)]
    cell_size: Option<f64>,
    /// Minimum vertical extent of a candidate cell in metres [default: 1.0]
    #[arg(long)]
    min_vertical_extent: Option<f64>,
    /// Maximum horizontal RMS spread of a pole cluster in metres [default: 0.30]
    #[arg(long)]
    max_horizontal_rms: Option<f64>,
    /// Minimum points in a pole cluster [default: 30]
    #[arg(long)]
    min_support_points: Option<usize>,
    /// Detections closer than this are merged, in metres [default: 0.5]
    #[arg(long)]
    merge_radius: Option<f64>,
}

impl DetectorFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let d = &mut cfg.detector;
        set(&mut d.cell_size, self.cell_size);
        set(&mut d.min_vertical_extent, self.min_vertical_extent);
        set(&mut d.max_horizontal_rms, self.max_horizontal_rms);
        set(&mut d.min_support_points, self.min_support_points);
        set(&mut d.merge_radius, self.merge_radius);
    }
}

#[derive(Args)]
struct ImageFlags {
    /// Image radius around the pole in metres [default: 3.0]
    #[arg(long)]
    radius: Option<f64>,
    /// Lowest height above the pole base in metres [default: 0]
    #[arg(long)]
    z_min: Option<f64>,
    /// Highest height above the pole base in metres [default: 8]
    #[arg(long)]
    z_max: Option<f64>,
    /// Height bins [default: 80]
    #[arg(long)]
    rows: Option<usize>,
    /// Angular bins [default: 360]
    #[arg(long)]
    cols: Option<usize>,
    /// Rotate images to their canonical origin [default: true]
    #[arg(long)]
    canonicalize: Option<bool>,
}

impl ImageFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let i = &mut cfg.image;
        set(&mut i.radius, self.radius);
        set(&mut i.z_min, self.z_min);
        set(&mut i.z_max, self.z_max);
        set(&mut i.rows, self.rows);
        set(&mut i.cols, self.cols);
        set(&mut i.canonicalize, self.canonicalize);
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Training regime, `cl` or `sl` [default: cl]
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// NT-Xent temperature [default: 0.07]
    #[arg(long)]
    temperature: Option<f64>,
    /// Pole ids per contrastive batch [default: 32]
    #[arg(long)]
    batch_pole_ids: Option<usize>,
    /// Pairs per supervised step [default: 64]
    #[arg(long)]
    sl_batch_pairs: Option<usize>,
    /// Fraction of pole ids used for training [default: 0.8]
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Random circular column shifts on training views [default: false]
    #[arg(long)]
    augment_shift: Option<bool>,
    /// Descriptor dimension [default: 128]
    #[arg(long)]
    emb_dim: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.train;
        set(&mut t.regime, self.regime);
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr, self.lr);
        set(&mut t.temperature, self.temperature);
        set(&mut t.batch_pole_ids, self.batch_pole_ids);
        set(&mut t.sl_batch_pairs, self.sl_batch_pairs);
        set(&mut t.split_ratio, self.split_ratio);
        set(&mut t.augment_shift, self.augment_shift);
        set(&mut t.emb_dim, self.emb_dim);
    }
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "cl" => Ok(Regime::Cl),
        "sl" => Ok(Regime::Sl),
        _ => Err(format!("unknown regime `{s}`, expected `cl` or `sl`")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the session clouds and scene.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args)]
struct DetectArgs {
    /// Point cloud file.
    #[arg(long)]
    cloud: PathBuf,
    /// Output detections JSON.
    #[arg(long)]
    out: PathBuf,
    /// scene.json with ground-truth poles; enables precision/recall and
    /// labels detections with pole ids.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Association tolerance in metres [default: 0.5]
    #[arg(long)]
    tol: Option<f64>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    detector: DetectorFlags,
}

#[derive(Args)]
struct RenderArgs {
    /// Point cloud file.
    #[arg(long)]
    cloud: PathBuf,
    /// Detections JSON from `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Output directory for PGM images and manifest.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    image: ImageFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training images.
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint; the history is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EmbedArgs {
    /// Manifest of images to encode.
    #[arg(long)]
    manifest: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output descriptor database.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of query images.
    #[arg(long)]
    query: PathBuf,
    /// Manifest of database images.
    #[arg(long, conflicts_with = "db_file", required_unless_present = "db_file")]
    db: Option<PathBuf>,
    /// Precomputed descriptor database (requires --checkpoint).
    #[arg(long)]
    db_file: Option<PathBuf>,
    /// Encoder checkpoint for the descriptor matcher.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Use the handcrafted shift-search baseline on raw images.
    #[arg(long)]
    baseline: bool,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// Output directory for all artifacts.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn validated(cfg: PipelineConfig) -> Result<PipelineConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    a.synth.apply(&mut cfg);
    let cfg = validated(cfg)?;
    let out = run_synth(&cfg.synth)?;
    let paths = write_synth(&out, &a.out_dir)?;
    println!("poles: {}", out.scene.poles.len());
    println!("clutter objects: {}", out.scene.clutter.len());
    for (cloud, path) in out.clouds.iter().zip(&paths) {
        println!("session {}: {} points -> {}", cloud.session_id, cloud.len(), path.display());
    }
    Ok(())
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    a.detector.apply(&mut cfg);
    set(&mut cfg.eval.association_tol, a.tol);
    let cfg = validated(cfg)?;
    let cloud = read_cloud(&a.cloud)?;
    let truth = a.truth.as_ref().map(read_ground_truth).transpose()?;
    let out = run_detect(&cloud, &cfg.detector, truth.as_ref().map(|t| (t, cfg.eval.association_tol)))?;
    write_detections(&out.records, &a.out)?;
    println!("detections: {}", out.records.len());
    if let Some((p, r)) = out.quality {
        println!("precision: {p:.4}");
        println!("recall: {r:.4}");
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    a.image.apply(&mut cfg);
    let cfg = validated(cfg)?;
    let cloud = read_cloud(&a.cloud)?;
    let records = read_detections(&a.detections)?;
    let images = run_render(&cloud, &records, &cfg.image)?;
    let manifest = write_images(&images, &a.out_dir)?;
    println!("images: {} -> {}", images.len(), manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    a.train.apply(&mut cfg);
    let cfg = validated(cfg)?;
    let obs = ObservationSet::from_images(load_manifest_images(&a.manifest)?)?;
    let outcome = train_with_progress(&obs, &cfg.train, |e| {
        println!("epoch {}\tloss {:.6}\tval recall@1 {:.4}", e.epoch, e.train_loss, e.val_recall_at_1)
    })?;
    let history = write_training(&outcome, &a.out)?;
    println!("initial val recall@1: {:.4}", outcome.initial_val_recall_at_1);
    println!("checkpoint: {}", a.out.display());
    println!("history: {}", history.display());
    Ok(())
}

fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let images = load_manifest_images(&a.manifest)?;
    let db = embed_images(&ckpt, &images)?;
    write_db(&db, &a.out)?;
    println!("descriptors: {} x {} -> {}", db.len(), db.dim, a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let queries = load_manifest_images(&a.query)?;
    let report = if a.baseline {
        let Some(db_path) = &a.db else { bail!("--baseline needs --db with a manifest of raw images") };
        evaluate_baseline(&queries, &load_manifest_images(db_path)?)?
    } else {
        let ckpt_path = a.checkpoint.as_ref().context("--checkpoint is required without --baseline")?;
        let ckpt = read_checkpoint(ckpt_path)?;
        let q = embed_images(&ckpt, &queries)?;
        let db = match (&a.db, &a.db_file) {
            (Some(m), _) => embed_images(&ckpt, &load_manifest_images(m)?)?,
            (None, Some(f)) => read_db(f)?,
            (None, None) => bail!("one of --db or --db-file is required"),
        };
        if db.dim != ckpt.params.emb_dim {
            bail!("database dimension {} does not match checkpoint emb_dim {}", db.dim, ckpt.params.emb_dim);
        }
        evaluate_descriptors(&q, &db)?
    };
    write_report(&report, &a.out)?;
    for (k, v) in &report.recall_at {
        println!("recall@{k}: {v:.4}");
    }
    println!("mrr: {:.4}", report.mrr);
    Ok(())
}

fn cmd_repro(a: &ReproArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    a.synth.apply(&mut cfg);
    a.train.apply(&mut cfg);
    let cfg = validated(cfg)?;
    let start = Instant::now();
    let report = run_repro(&cfg, &a.out_dir, &mut |line| {
        println!("[{:8.1}s] {line}", start.elapsed().as_secs_f64())
    })?;
    println!();
    print!("{}", report.table());
    println!("cl val recall@1: initial {:.4}, final {:.4}", report.cl_initial_val_recall_at_1, report.cl_final_val_recall_at_1().unwrap_or(f64::NAN));
    println!("total time: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Repro(a) => cmd_repro(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
