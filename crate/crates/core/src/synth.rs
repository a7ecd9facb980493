//! Synthetic multi-session pole scenes.
//!
//! A scene is a square area with vertical cylindrical poles and, around each
//! pole, a private arrangement of clutter objects (axis-aligned boxes,
//! vertical walls, low ellipsoidal blobs). Sessions re-sample the same scene
//! with fresh sensor noise, per-point clutter dropout and per-object jitter.
//! Pole shafts never move between sessions and are never dropped.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{derive, purpose, SplitMix64};

/// Placement attempts per pole before the configuration is declared
/// unsatisfiable.
const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;
const MAX_CLUTTER_ATTEMPTS: usize = 200;

/// Boxes shorter than this are never tall enough to look like a pole.
const LOW_BOX_MAX_HEIGHT: f64 = 0.9;
/// Minimum footprint side for a box to be allowed to exceed
/// [`LOW_BOX_MAX_HEIGHT`].
const TALL_BOX_MIN_SIDE: f64 = 0.8;
/// Tall objects clear the detector's default 1 m extent test by a wide
/// margin so that sparse sampling never leaves isolated qualifying cells.
const TALL_BOX_MIN_HEIGHT: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_poles: usize,
    pub n_sessions: u32,
    pub area_side: f64,
    pub min_pole_separation: f64,
    pub pole_radius_range: (f64, f64),
    pub pole_height_range: (f64, f64),
    pub clutter_objects_per_pole: (usize, usize),
    /// Clutter lives in the annulus `[clutter_inner_radius, clutter_radius]`
    /// around its pole. Poles keep `clutter_radius` away from the area border.
    pub clutter_radius: f64,
    pub clutter_inner_radius: f64,
    pub points_per_surface_unit: f64,
    pub ground_density: f64,
    pub sensor_noise_sigma: f64,
    pub session_dropout: f64,
    pub session_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_poles: 200,
            n_sessions: 2,
            area_side: 150.0,
            min_pole_separation: 7.0,
            pole_radius_range: (0.10, 0.20),
            pole_height_range: (4.0, 7.0),
            clutter_objects_per_pole: (3, 6),
            clutter_radius: 3.0,
            clutter_inner_radius: 1.0,
            points_per_surface_unit: 400.0,
            ground_density: 2.0,
            sensor_noise_sigma: 0.02,
            session_dropout: 0.3,
            session_jitter: 0.25,
            seed: 0,
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.area_side,
            self.min_pole_separation,
            self.pole_radius_range.0,
            self.pole_radius_range.1,
            self.pole_height_range.0,
            self.pole_height_range.1,
            self.clutter_radius,
            self.clutter_inner_radius,
            self.points_per_surface_unit,
            self.ground_density,
            self.sensor_noise_sigma,
            self.session_dropout,
            self.session_jitter,
        ];
        check(finite.iter().all(|v| v.is_finite()), || "synth: all values must be finite".into())?;
        check(self.n_poles >= 1, || "synth.n_poles must be at least 1".into())?;
        check(self.n_sessions >= 1, || "synth.n_sessions must be at least 1".into())?;
        check(self.area_side > 0.0, || "synth.area_side must be positive".into())?;
        check(self.points_per_surface_unit > 0.0, || {
            "synth.points_per_surface_unit must be positive".into()
        })?;
        check(self.ground_density >= 0.0, || "synth.ground_density must be non-negative".into())?;
        check(self.sensor_noise_sigma >= 0.0, || {
            "synth.sensor_noise_sigma must be non-negative".into()
        })?;
        check((0.0..1.0).contains(&self.session_dropout), || {
            "synth.session_dropout must lie in [0, 1)".into()
        })?;
        check(self.session_jitter >= 0.0, || "synth.session_jitter must be non-negative".into())?;
        let (r0, r1) = self.pole_radius_range;
        check(0.0 < r0 && r0 <= r1, || "synth.pole_radius_range must be 0 < lo <= hi".into())?;
        let (h0, h1) = self.pole_height_range;
        check(0.0 < h0 && h0 <= h1, || "synth.pole_height_range must be 0 < lo <= hi".into())?;
        let (c0, c1) = self.clutter_objects_per_pole;
        check(c0 <= c1, || "synth.clutter_objects_per_pole must be lo <= hi".into())?;
        check(
            r1 < self.clutter_inner_radius && self.clutter_inner_radius < self.clutter_radius,
            || "synth: need pole radius < clutter_inner_radius < clutter_radius".into(),
        )?;
        check(self.min_pole_separation > 2.0 * self.clutter_radius, || {
            format!(
                "synth.min_pole_separation ({}) must exceed 2 x clutter_radius ({}) so pole neighbourhoods do not overlap",
                self.min_pole_separation, self.clutter_radius
            )
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleSpec {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClutterShape {
    /// Axis-aligned box resting on the ground.
    Box { cx: f64, cy: f64, half_x: f64, half_y: f64, height: f64 },
    /// Thin vertical wall segment; `angle` is the segment direction in radians.
    Wall { cx: f64, cy: f64, half_len: f64, angle: f64, height: f64 },
    /// Ellipsoid resting on the ground.
    Blob { cx: f64, cy: f64, rx: f64, ry: f64, rz: f64 },
}

impl ClutterShape {
    fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut s = self.clone();
        match &mut s {
            ClutterShape::Box { cx, cy, .. }
            | ClutterShape::Wall { cx, cy, .. }
            | ClutterShape::Blob { cx, cy, .. } => {
                *cx += dx;
                *cy += dy;
            }
        }
        s
    }

    /// Minimum and maximum horizontal distance of the footprint from `(px, py)`.
    fn radial_extent(&self, px: f64, py: f64) -> (f64, f64) {
        match *self {
            ClutterShape::Box { cx, cy, half_x, half_y, .. } => {
                let dx = (cx - px).abs();
                let dy = (cy - py).abs();
                let near = ((dx - half_x).max(0.0)).hypot((dy - half_y).max(0.0));
                let far = (dx + half_x).hypot(dy + half_y);
                (near, far)
            }
            ClutterShape::Wall { cx, cy, half_len, angle, .. } => {
                let (s, c) = angle.sin_cos();
                let (ax, ay) = (cx - half_len * c, cy - half_len * s);
                let (bx, by) = (cx + half_len * c, cy + half_len * s);
                let far = (ax - px).hypot(ay - py).max((bx - px).hypot(by - py));
                // Closest point of the segment.
                let t = ((px - ax) * c + (py - ay) * s).clamp(0.0, 2.0 * half_len);
                let near = (ax + t * c - px).hypot(ay + t * s - py);
                (near, far)
            }
            ClutterShape::Blob { cx, cy, rx, ry, .. } => {
                let d = (cx - px).hypot(cy - py);
                let r = rx.max(ry);
                ((d - r).max(0.0), d + r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterObject {
    pub pole_id: u64,
    pub shape: ClutterShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub poles: Vec<PoleSpec>,
    pub clutter: Vec<ClutterObject>,
    pub config: SynthConfig,
}

/// Pole identity → ground-plane center. Anchors do not move between
/// sessions, so one map serves every session of a scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub centers: BTreeMap<u64, (f64, f64)>,
}

impl GroundTruth {
    pub fn from_poles(poles: &[PoleSpec]) -> Self {
        Self { centers: poles.iter().map(|p| (p.id, (p.x, p.y))).collect() }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn generate_scene(config: &SynthConfig) -> Result<(Scene, GroundTruth)> {
    config.validate()?;
    let margin = config.clutter_radius;
    let lo = margin;
    let hi = config.area_side - margin;
    if hi < lo {
        return Err(Error::Config(format!(
            "synth.area_side {} is smaller than twice the clutter radius {}",
            config.area_side, margin
        )));
    }

    let mut place = SplitMix64::stream(config.seed, purpose::POLE_PLACEMENT, 0);
    let min_sep2 = config.min_pole_separation * config.min_pole_separation;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(config.n_poles);
    for i in 0..config.n_poles {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = place.uniform(lo, hi);
            let y = place.uniform(lo, hi);
            let clear = centers.iter().all(|&(px, py)| {
                let (dx, dy) = (x - px, y - py);
                dx * dx + dy * dy >= min_sep2
            });
            if clear {
                centers.push((x, y));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place pole {} of {} with separation {} m in a {} m square after {} attempts",
                i + 1,
                config.n_poles,
                config.min_pole_separation,
                config.area_side,
                MAX_PLACEMENT_ATTEMPTS
            )));
        }
    }

    let poles: Vec<PoleSpec> = centers
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut rng = SplitMix64::stream(config.seed, purpose::POLE_SHAPE, i as u64);
            PoleSpec {
                id: i as u64,
                x,
                y,
                radius: rng.uniform(config.pole_radius_range.0, config.pole_radius_range.1),
                height: rng.uniform(config.pole_height_range.0, config.pole_height_range.1),
            }
        })
        .collect();

    let mut clutter = Vec::new();
    for pole in &poles {
        let mut rng = SplitMix64::stream(config.seed, purpose::CLUTTER, pole.id);
        let (c0, c1) = config.clutter_objects_per_pole;
        let n_objects = rng.range_inclusive(c0, c1);
        for _ in 0..n_objects {
            if let Some(shape) = place_clutter(&mut rng, pole, config) {
                clutter.push(ClutterObject { pole_id: pole.id, shape });
            }
        }
    }

    let truth = GroundTruth::from_poles(&poles);
    Ok((Scene { poles, clutter, config: config.clone() }, truth))
}

fn place_clutter(rng: &mut SplitMix64, pole: &PoleSpec, config: &SynthConfig) -> Option<ClutterShape> {
    // Objects must stay inside the annulus even after the largest session jitter.
    let inner = config.clutter_inner_radius + config.session_jitter;
    let outer = config.clutter_radius - config.session_jitter;
    for _ in 0..MAX_CLUTTER_ATTEMPTS {
        let rho = rng.uniform(inner, outer);
        let phi = rng.uniform(0.0, TAU);
        let (cx, cy) = (pole.x + rho * phi.cos(), pole.y + rho * phi.sin());
        let shape = match rng.below(3) {
            0 => {
                let half_x = 0.5 * rng.uniform(0.4, 1.2);
                let half_y = 0.5 * rng.uniform(0.4, 1.2);
                let tall_ok = 2.0 * half_x.min(half_y) >= TALL_BOX_MIN_SIDE;
                let height = if tall_ok && rng.bernoulli(0.5) {
                    rng.uniform(TALL_BOX_MIN_HEIGHT, 2.4)
                } else {
                    rng.uniform(0.3, LOW_BOX_MAX_HEIGHT)
                };
                ClutterShape::Box { cx, cy, half_x, half_y, height }
            }
            1 => ClutterShape::Wall {
                cx,
                cy,
                half_len: 0.5 * rng.uniform(1.4, 2.6),
                angle: rng.uniform(0.0, PI),
                height: rng.uniform(TALL_BOX_MIN_HEIGHT + 0.4, 2.6),
            },
            _ => ClutterShape::Blob {
                cx,
                cy,
                rx: rng.uniform(0.3, 0.6),
                ry: rng.uniform(0.3, 0.6),
                rz: rng.uniform(0.2, 0.45),
            },
        };
        let (near, far) = shape.radial_extent(pole.x, pole.y);
        if near >= inner && far <= outer {
            return Some(shape);
        }
    }
    None
}

/// Where a sampled point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Ground,
    Pole(u64),
    /// Index into [`Scene::clutter`].
    Clutter(usize),
}

/// Seed of the session stream family for `(seed, session_id)`.
pub fn session_seed(seed: u64, session_id: u32) -> u64 {
    derive(derive(seed, purpose::SESSION), session_id as u64)
}

const STREAM_GROUND: u64 = 0;
const STREAM_POLE: u64 = 1;
const STREAM_CLUTTER: u64 = 2;

pub fn sample_session(scene: &Scene, session_id: u32) -> PointCloud {
    sample_session_labeled(scene, session_id).0
}

/// Like [`sample_session`] but also returns the source of every point.
pub fn sample_session_labeled(scene: &Scene, session_id: u32) -> (PointCloud, Vec<PointSource>) {
    let cfg = &scene.config;
    let sseed = session_seed(cfg.seed, session_id);
    let density = cfg.points_per_surface_unit;
    let sigma = cfg.sensor_noise_sigma;
    let mut points = Vec::new();
    let mut sources = Vec::new();

    {
        let mut rng = SplitMix64::stream(sseed, STREAM_GROUND, 0);
        let n = (cfg.area_side * cfg.area_side * cfg.ground_density).round() as usize;
        for _ in 0..n {
            let p = Point3::new(rng.uniform(0.0, cfg.area_side), rng.uniform(0.0, cfg.area_side), 0.0);
            points.push(add_noise(&mut rng, p, sigma));
            sources.push(PointSource::Ground);
        }
    }

    for pole in &scene.poles {
        let mut rng = SplitMix64::stream(sseed, STREAM_POLE, pole.id);
        let n = (TAU * pole.radius * pole.height * density).round() as usize;
        for _ in 0..n {
            let a = rng.uniform(0.0, TAU);
            let z = rng.uniform(0.0, pole.height);
            let p = Point3::new(pole.x + pole.radius * a.cos(), pole.y + pole.radius * a.sin(), z);
            points.push(add_noise(&mut rng, p, sigma));
            sources.push(PointSource::Pole(pole.id));
        }
    }

    let mut buf = Vec::new();
    for (idx, obj) in scene.clutter.iter().enumerate() {
        let mut rng = SplitMix64::stream(sseed, STREAM_CLUTTER, idx as u64);
        let shape = if cfg.session_jitter > 0.0 {
            let mag = cfg.session_jitter * rng.next_f64();
            let dir = rng.uniform(0.0, TAU);
            obj.shape.translated(mag * dir.cos(), mag * dir.sin())
        } else {
            obj.shape.clone()
        };
        buf.clear();
        sample_surface(&shape, density, &mut rng, &mut buf);
        for &p in &buf {
            if cfg.session_dropout > 0.0 && rng.bernoulli(cfg.session_dropout) {
                continue;
            }
            points.push(add_noise(&mut rng, p, sigma));
            sources.push(PointSource::Clutter(idx));
        }
    }

    (PointCloud { points, session_id }, sources)
}

fn add_noise(rng: &mut SplitMix64, p: Point3, sigma: f64) -> Point3 {
    if sigma == 0.0 {
        return p;
    }
    Point3::new(p.x + sigma * rng.normal(), p.y + sigma * rng.normal(), p.z + sigma * rng.normal())
}

fn sample_rect(
    rng: &mut SplitMix64,
    density: f64,
    origin: Point3,
    u: Point3,
    v: Point3,
    out: &mut Vec<Point3>,
) {
    let lu = (u.x * u.x + u.y * u.y + u.z * u.z).sqrt();
    let lv = (v.x * v.x + v.y * v.y + v.z * v.z).sqrt();
    let n = (lu * lv * density).round() as usize;
    for _ in 0..n {
        let (a, b) = (rng.next_f64(), rng.next_f64());
        out.push(Point3::new(
            origin.x + a * u.x + b * v.x,
            origin.y + a * u.y + b * v.y,
            origin.z + a * u.z + b * v.z,
        ));
    }
}

/// Knud Thomsen's approximation of an ellipsoid's surface area.
fn ellipsoid_area(a: f64, b: f64, c: f64) -> f64 {
    const P: f64 = 1.6075;
    let (ap, bp, cp) = (a.powf(P), b.powf(P), c.powf(P));
    4.0 * PI * ((ap * bp + ap * cp + bp * cp) / 3.0).powf(1.0 / P)
}

fn sample_surface(shape: &ClutterShape, density: f64, rng: &mut SplitMix64, out: &mut Vec<Point3>) {
    match *shape {
        ClutterShape::Box { cx, cy, half_x, half_y, height } => {
            let (x0, y0) = (cx - half_x, cy - half_y);
            let (wx, wy) = (2.0 * half_x, 2.0 * half_y);
            let up = Point3::new(0.0, 0.0, height);
            let ex = Point3::new(wx, 0.0, 0.0);
            let ey = Point3::new(0.0, wy, 0.0);
            sample_rect(rng, density, Point3::new(x0, y0, height), ex, ey, out);
            sample_rect(rng, density, Point3::new(x0, y0, 0.0), ex, up, out);
            sample_rect(rng, density, Point3::new(x0, y0 + wy, 0.0), ex, up, out);
            sample_rect(rng, density, Point3::new(x0, y0, 0.0), ey, up, out);
            sample_rect(rng, density, Point3::new(x0 + wx, y0, 0.0), ey, up, out);
        }
        ClutterShape::Wall { cx, cy, half_len, angle, height } => {
            let (s, c) = angle.sin_cos();
            let origin = Point3::new(cx - half_len * c, cy - half_len * s, 0.0);
            let along = Point3::new(2.0 * half_len * c, 2.0 * half_len * s, 0.0);
            sample_rect(rng, density, origin, along, Point3::new(0.0, 0.0, height), out);
        }
        ClutterShape::Blob { cx, cy, rx, ry, rz } => {
            let n = (ellipsoid_area(rx, ry, rz) * density).round() as usize;
            for _ in 0..n {
                let (mut dx, mut dy, mut dz);
                loop {
                    dx = rng.normal();
                    dy = rng.normal();
                    dz = rng.normal();
                    let norm = (dx * dx + dy * dy + dz * dz).sqrt();
                    if norm > 1e-12 {
                        dx /= norm;
                        dy /= norm;
                        dz /= norm;
                        break;
                    }
                }
                out.push(Point3::new(cx + rx * dx, cy + ry * dy, rz + rz * dz));
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    poles: Vec<PoleSpec>,
    config: SynthConfig,
}

/// Writes `{poles, config}`; clutter is a pure function of the config and is
/// regenerated on load.
pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = SceneFile { poles: scene.poles.clone(), config: scene.config.clone() };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Json { path: path.into(), source: e })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a scene file. Returns the ground truth recorded in the file and the
/// scene regenerated from the embedded config.
pub fn read_scene(path: impl AsRef<Path>) -> Result<(Scene, GroundTruth)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    let (scene, _) = generate_scene(&file.config)?;
    if scene.poles != file.poles {
        return Err(Error::format(path, "pole list does not match the scene regenerated from its config"));
    }
    let truth = GroundTruth::from_poles(&file.poles);
    Ok((scene, truth))
}

/// Ground truth only; tolerates pole lists that were edited by hand.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    Ok(GroundTruth::from_poles(&file.poles))
}
