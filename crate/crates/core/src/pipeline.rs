//! File-based pipeline stages and the end-to-end reproduction run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{write_cloud, PointCloud};
use crate::detect::{associate_detections, detect_poles, label_detections, write_detections, DetectionRecord, DetectorParams};
use crate::encoder::checkpoint::{write_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{embed_all, evaluate_baseline, evaluate_descriptors, write_db, write_report, DescriptorDB, EvalReport};
use crate::image::{read_manifest, read_pgm, render_pole_image, write_manifest, write_pgm, ManifestRow, PoleImage, PoleImageParams};
use crate::synth::{generate_scene, sample_session, write_scene, GroundTruth, Scene, SynthConfig};
use crate::training::{train_with_progress, write_history, EpochStats, ObservationSet, Regime, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Detection-to-truth matching radius in metres.
    pub association_tol: f64,
    pub query_session: u32,
    pub db_session: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { association_tol: 0.5, query_session: 0, db_session: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub detector: DetectorParams,
    pub image: PoleImageParams,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl PipelineConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.detector.validate()?;
        self.image.validate()?;
        self.train.validate()?;
        if !(self.eval.association_tol.is_finite() && self.eval.association_tol > 0.0) {
            return Err(Error::Config("eval.association_tol must be positive".into()));
        }
        if self.eval.query_session == self.eval.db_session {
            return Err(Error::Config("eval.query_session and eval.db_session must differ".into()));
        }
        if self.eval.query_session.max(self.eval.db_session) >= self.synth.n_sessions {
            return Err(Error::Config(format!(
                "eval sessions {} and {} need synth.n_sessions > {}",
                self.eval.query_session,
                self.eval.db_session,
                self.eval.query_session.max(self.eval.db_session)
            )));
        }
        Ok(())
    }

    /// Overrides every nested seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct SynthOutput {
    pub scene: Scene,
    pub truth: GroundTruth,
    pub clouds: Vec<PointCloud>,
}

pub fn cloud_file_name(session_id: u32) -> String {
    format!("session_{session_id}.pcxyz")
}

pub const SCENE_FILE: &str = "scene.json";

pub fn run_synth(config: &SynthConfig) -> Result<SynthOutput> {
    let (scene, truth) = generate_scene(config)?;
    let clouds = (0..config.n_sessions).map(|s| sample_session(&scene, s)).collect();
    Ok(SynthOutput { scene, truth, clouds })
}

/// Writes one cloud per session plus `scene.json` into `out_dir`.
pub fn write_synth(out: &SynthOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    write_scene(&out.scene, out_dir.join(SCENE_FILE))?;
    out.clouds
        .iter()
        .map(|c| {
            let p = out_dir.join(cloud_file_name(c.session_id));
            write_cloud(c, &p)?;
            Ok(p)
        })
        .collect()
}

pub struct DetectOutput {
    pub records: Vec<DetectionRecord>,
    /// `(precision, recall)` when ground truth was given.
    pub quality: Option<(f64, f64)>,
}

pub fn run_detect(cloud: &PointCloud, params: &DetectorParams, truth: Option<(&GroundTruth, f64)>) -> Result<DetectOutput> {
    params.validate()?;
    let dets = detect_poles(cloud, params);
    match truth {
        Some((truth, tol)) => {
            let assoc = associate_detections(&dets, truth, tol)?;
            Ok(DetectOutput { records: label_detections(&dets, Some(&assoc)), quality: Some((assoc.precision, assoc.recall)) })
        }
        None => Ok(DetectOutput { records: label_detections(&dets, None), quality: None }),
    }
}

/// One image per detection, tagged with the detection id.
pub fn run_render(cloud: &PointCloud, records: &[DetectionRecord], params: &PoleImageParams) -> Result<Vec<PoleImage>> {
    params.validate()?;
    Ok(records
        .iter()
        .map(|r| {
            let mut img = render_pole_image(cloud, &r.to_detection(), params);
            img.pole_id = Some(r.id);
            img
        })
        .collect())
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn image_file_name(img: &PoleImage) -> String {
    match img.pole_id {
        Some(id) => format!("pole{id:05}_s{}.pgm", img.session_id),
        None => format!("pole_none_s{}.pgm", img.session_id),
    }
}

/// Writes PGMs and a manifest with paths relative to `out_dir`. Returns the
/// manifest path.
pub fn write_images(images: &[PoleImage], out_dir: &Path) -> Result<PathBuf> {
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let name = image_file_name(img);
        write_pgm(img, out_dir.join(&name))?;
        let pole_id = img.pole_id.ok_or_else(|| Error::InvalidArgument("manifest images need pole ids".into()))?;
        rows.push(ManifestRow { pole_id, session_id: img.session_id, image_path: PathBuf::from(name) });
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&rows, &manifest)?;
    Ok(manifest)
}

/// Loads every image listed in a manifest. The manifest's ids take
/// precedence over ids stored in the PGM comments.
pub fn load_manifest_images(path: impl AsRef<Path>) -> Result<Vec<PoleImage>> {
    read_manifest(path)?
        .into_iter()
        .map(|row| {
            let mut img = read_pgm(&row.image_path)?;
            img.pole_id = Some(row.pole_id);
            img.session_id = row.session_id;
            Ok(img)
        })
        .collect()
}

/// Writes the checkpoint and `<stem>_history.tsv` next to it.
pub fn write_training(outcome: &TrainOutcome, checkpoint_path: &Path) -> Result<PathBuf> {
    if let Some(dir) = checkpoint_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_checkpoint(&outcome.checkpoint, checkpoint_path)?;
    let history = history_path(checkpoint_path);
    write_history(&outcome.history, &history)?;
    Ok(history)
}

pub fn history_path(checkpoint_path: &Path) -> PathBuf {
    let stem = checkpoint_path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    checkpoint_path.with_file_name(format!("{stem}_history.tsv"))
}

pub fn embed_images(ckpt: &Checkpoint, images: &[PoleImage]) -> Result<DescriptorDB> {
    let ids = images
        .iter()
        .map(|img| img.pole_id.ok_or_else(|| Error::InvalidArgument("images need pole ids".into())))
        .collect::<Result<Vec<_>>>()?;
    embed_all(&ckpt.params, ids.into_iter().zip(images))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Sl,
    Cl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Sl => "sl",
            Method::Cl => "cl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub query_session: u32,
    pub db_session: u32,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
}

impl ResultRow {
    fn new(method: Method, query_session: u32, db_session: u32, r: &EvalReport) -> Self {
        Self {
            method,
            query_session,
            db_session,
            recall_at_1: r.recall(1),
            recall_at_5: r.recall(5),
            recall_at_10: r.recall(10),
            mrr: r.mrr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub session_id: u32,
    pub detections: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub detection: Vec<DetectionSummary>,
    /// Pole ids observed in both evaluation sessions.
    pub usable_poles: usize,
    pub train_poles: usize,
    pub val_poles: usize,
    pub cl_initial_val_recall_at_1: f64,
    pub cl_history: Vec<HistoryRow>,
    pub sl_history: Vec<HistoryRow>,
    /// Forward direction first, then the reverse direction.
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall_at_1: f64,
}

impl From<&EpochStats> for HistoryRow {
    fn from(s: &EpochStats) -> Self {
        Self { epoch: s.epoch, train_loss: s.train_loss, val_recall_at_1: s.val_recall_at_1 }
    }
}

impl ReproReport {
    pub fn row(&self, method: Method, query_session: u32) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.query_session == query_session)
    }

    pub fn cl_final_val_recall_at_1(&self) -> Option<f64> {
        self.cl_history.last().map(|h| h.val_recall_at_1)
    }

    /// Tab-separated comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from("method\tquery\tdb\trecall@1\trecall@5\trecall@10\tmrr\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.method.name(),
                r.query_session,
                r.db_session,
                r.recall_at_1,
                r.recall_at_5,
                r.recall_at_10,
                r.mrr
            )
            .unwrap();
        }
        s
    }
}

/// Output locations of a reproduction run, relative to its root.
pub mod layout {
    pub const SYNTH: &str = "synth";
    pub const DETECT: &str = "detect";
    pub const CANONICAL: &str = "images/canonical";
    pub const RAW: &str = "images/raw";
    pub const CL_CHECKPOINT: &str = "train/cl.pick";
    pub const SL_CHECKPOINT: &str = "train/sl.pick";
    pub const CL_DB: &str = "eval/cl_val.pidb";
    pub const SL_DB: &str = "eval/sl_val.pidb";
    pub const EVAL: &str = "eval";
    pub const TABLE: &str = "results.tsv";
    pub const REPORT: &str = "repro.json";
}

fn eval_descriptor_pair(db: &DescriptorDB, q: u32, d: u32) -> Result<EvalReport> {
    evaluate_descriptors(&db.session(q), &db.session(d))
}

/// Full run: synth, detect, render, train CL and SL, evaluate baseline, SL
/// and CL on the validation poles in both directions. Every artifact is
/// written under `out_dir`; `log` receives progress lines.
pub fn run_repro(config: &PipelineConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<ReproReport> {
    config.validate()?;
    create_dir(out_dir)?;
    let (qs, ds) = (config.eval.query_session, config.eval.db_session);

    let synth = run_synth(&config.synth).map_err(Error::in_stage("synth"))?;
    write_synth(&synth, &out_dir.join(layout::SYNTH)).map_err(Error::in_stage("synth"))?;
    log(&format!("synth: {} poles, {} sessions", synth.scene.poles.len(), synth.clouds.len()));

    let detect_dir = out_dir.join(layout::DETECT);
    create_dir(&detect_dir)?;
    let mut detection = Vec::new();
    let mut canonical = Vec::new();
    let mut raw = Vec::new();
    let raw_params = PoleImageParams { canonicalize: false, ..config.image.clone() };
    let canon_params = PoleImageParams { canonicalize: true, ..config.image.clone() };
    for cloud in &synth.clouds {
        let det = run_detect(cloud, &config.detector, Some((&synth.truth, config.eval.association_tol)))
            .map_err(Error::in_stage("detect"))?;
        write_detections(&det.records, detect_dir.join(format!("session_{}.json", cloud.session_id)))
            .map_err(Error::in_stage("detect"))?;
        let (precision, recall) = det.quality.unwrap_or((0.0, 0.0));
        log(&format!(
            "detect: session {} -> {} detections, precision {precision:.3}, recall {recall:.3}",
            cloud.session_id,
            det.records.len()
        ));
        detection.push(DetectionSummary { session_id: cloud.session_id, detections: det.records.len(), precision, recall });
        // Unmatched detections carry per-session ids and cannot be paired
        // across sessions.
        let matched: Vec<DetectionRecord> =
            det.records.into_iter().filter(|r| synth.truth.centers.contains_key(&r.id)).collect();
        canonical.extend(run_render(cloud, &matched, &canon_params).map_err(Error::in_stage("render"))?);
        raw.extend(run_render(cloud, &matched, &raw_params).map_err(Error::in_stage("render"))?);
    }

    let in_session = |imgs: &[PoleImage], s: u32| -> BTreeSet<u64> {
        imgs.iter().filter(|i| i.session_id == s).filter_map(|i| i.pole_id).collect()
    };
    let usable: BTreeSet<u64> = in_session(&canonical, qs).intersection(&in_session(&canonical, ds)).copied().collect();
    let keep = |imgs: Vec<PoleImage>| -> Vec<PoleImage> {
        imgs.into_iter().filter(|i| i.pole_id.is_some_and(|id| usable.contains(&id))).collect()
    };
    let canonical = keep(canonical);
    let raw = keep(raw);
    write_images(&canonical, &out_dir.join(layout::CANONICAL)).map_err(Error::in_stage("render"))?;
    write_images(&raw, &out_dir.join(layout::RAW)).map_err(Error::in_stage("render"))?;
    log(&format!("render: {} images of {} poles seen in sessions {qs} and {ds}", canonical.len(), usable.len()));

    let obs = ObservationSet::from_images(canonical).map_err(Error::in_stage("train"))?;
    let mut outcomes = Vec::new();
    for (regime, method, path) in [(Regime::Cl, Method::Cl, layout::CL_CHECKPOINT), (Regime::Sl, Method::Sl, layout::SL_CHECKPOINT)] {
        let cfg = TrainConfig { regime, val_query_session: qs, val_db_session: ds, ..config.train.clone() };
        let name = method.name();
        let outcome = train_with_progress(&obs, &cfg, |e| {
            log(&format!("train {name}: epoch {} loss {:.5} val recall@1 {:.4}", e.epoch, e.train_loss, e.val_recall_at_1))
        })
        .map_err(Error::in_stage("train"))?;
        write_training(&outcome, &out_dir.join(path)).map_err(Error::in_stage("train"))?;
        outcomes.push((method, outcome));
    }
    let (cl, sl) = (&outcomes[0].1, &outcomes[1].1);
    let val_ids: BTreeSet<u64> = cl.val_ids.iter().copied().collect();

    let eval_dir = out_dir.join(layout::EVAL);
    create_dir(&eval_dir)?;
    let val_obs = obs.subset(&val_ids);
    let val_images: Vec<PoleImage> = val_obs.items().iter().map(|o| o.image.clone()).collect();
    let val_raw: Vec<PoleImage> = raw.into_iter().filter(|i| i.pole_id.is_some_and(|id| val_ids.contains(&id))).collect();

    let mut dbs = Vec::new();
    for (method, outcome) in &outcomes {
        let db = embed_images(&outcome.checkpoint, &val_images).map_err(Error::in_stage("embed"))?;
        let path = if *method == Method::Cl { layout::CL_DB } else { layout::SL_DB };
        write_db(&db, out_dir.join(path)).map_err(Error::in_stage("embed"))?;
        dbs.push((*method, db));
    }

    let mut rows = Vec::new();
    for (q, d) in [(qs, ds), (ds, qs)] {
        let queries: Vec<PoleImage> = val_raw.iter().filter(|i| i.session_id == q).cloned().collect();
        let database: Vec<PoleImage> = val_raw.iter().filter(|i| i.session_id == d).cloned().collect();
        let report = evaluate_baseline(&queries, &database).map_err(Error::in_stage("eval"))?;
        write_report(&report, eval_dir.join(format!("baseline_{q}to{d}.json"))).map_err(Error::in_stage("eval"))?;
        rows.push(ResultRow::new(Method::Baseline, q, d, &report));
        for method in [Method::Sl, Method::Cl] {
            let db = &dbs.iter().find(|(m, _)| *m == method).unwrap().1;
            let report = eval_descriptor_pair(db, q, d).map_err(Error::in_stage("eval"))?;
            write_report(&report, eval_dir.join(format!("{}_{q}to{d}.json", method.name())))
                .map_err(Error::in_stage("eval"))?;
            rows.push(ResultRow::new(method, q, d, &report));
        }
    }

    let report = ReproReport {
        detection,
        usable_poles: usable.len(),
        train_poles: cl.train_ids.len(),
        val_poles: cl.val_ids.len(),
        cl_initial_val_recall_at_1: cl.initial_val_recall_at_1,
        cl_history: cl.history.iter().map(HistoryRow::from).collect(),
        sl_history: sl.history.iter().map(HistoryRow::from).collect(),
        rows,
    };
    let table_path = out_dir.join(layout::TABLE);
    std::fs::write(&table_path, report.table()).map_err(|e| Error::io(&table_path, e))?;
    let report_path = out_dir.join(layout::REPORT);
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json { path: report_path.clone(), source: e })?;
    std::fs::write(&report_path, text + "\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}
