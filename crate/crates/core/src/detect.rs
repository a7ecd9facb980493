//! Grid-and-cluster pole detection.
//!
//! Points are binned into an x-y grid; cells whose vertical extent reaches
//! `min_vertical_extent` become candidates, 8-connected candidates form
//! clusters, and a cluster is accepted as a pole when its points are tightly
//! concentrated around their x-y centroid. Ground cells never pass the extent
//! test, so no ground removal is needed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::synth::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub cell_size: f64,
    pub min_vertical_extent: f64,
    pub max_horizontal_rms: f64,
    pub min_support_points: usize,
    pub merge_radius: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            cell_size: 0.25,
            min_vertical_extent: 1.0,
            max_horizontal_rms: 0.30,
            min_support_points: 30,
            merge_radius: 0.5,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.cell_size, self.min_vertical_extent, self.max_horizontal_rms, self.merge_radius];
        if !positive.iter().all(|v| v.is_finite() && *v > 0.0) || self.min_support_points == 0 {
            return Err(Error::Config("detector: all parameters must be positive".into()));
        }
        if self.merge_radius < self.cell_size {
            return Err(Error::Config("detector.merge_radius must be >= cell_size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleDetection {
    pub center_x: f64,
    pub center_y: f64,
    /// Lowest supporting point.
    pub base_z: f64,
    pub vertical_extent: f64,
    pub support_count: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct CellStats {
    z_min: f64,
    z_max: f64,
}

type Cell = (i64, i64);

const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

pub fn detect_poles(cloud: &PointCloud, params: &DetectorParams) -> Vec<PoleDetection> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let inv = 1.0 / params.cell_size;
    let cell_of = |x: f64, y: f64| -> Cell { ((x * inv).floor() as i64, (y * inv).floor() as i64) };

    let mut cells: HashMap<Cell, (CellStats, Vec<u32>)> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let entry = cells
            .entry(cell_of(p.x, p.y))
            .or_insert_with(|| (CellStats { z_min: f64::INFINITY, z_max: f64::NEG_INFINITY }, Vec::new()));
        entry.0.z_min = entry.0.z_min.min(p.z);
        entry.0.z_max = entry.0.z_max.max(p.z);
        entry.1.push(i as u32);
    }

    let mut candidates: Vec<Cell> = cells
        .iter()
        .filter(|(_, (s, _))| s.z_max - s.z_min >= params.min_vertical_extent)
        .map(|(c, _)| *c)
        .collect();
    candidates.sort_unstable();
    let mut label: HashMap<Cell, usize> = candidates.iter().map(|c| (*c, usize::MAX)).collect();

    let mut raw = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for &seed in &candidates {
        if label[&seed] != usize::MAX {
            continue;
        }
        let cluster_id = raw.len();
        members.clear();
        label.insert(seed, cluster_id);
        stack.push(seed);
        while let Some(c) = stack.pop() {
            members.push(c);
            for (dx, dy) in NEIGHBOURS {
                let n = (c.0 + dx, c.1 + dy);
                if let Some(l) = label.get_mut(&n) {
                    if *l == usize::MAX {
                        *l = cluster_id;
                        stack.push(n);
                    }
                }
            }
        }
        members.sort_unstable();
        raw.push(summarize(cloud, &cells, &members));
    }

    let poles: Vec<Accum> = raw
        .into_iter()
        .filter(|a| a.count >= params.min_support_points && a.horizontal_rms() <= params.max_horizontal_rms)
        .collect();

    let mut merged = merge_close(poles, params.merge_radius);
    let mut out: Vec<PoleDetection> = merged
        .drain(..)
        .map(|a| {
            let (cx, cy) = a.centroid();
            PoleDetection {
                center_x: cx,
                center_y: cy,
                base_z: a.z_min,
                vertical_extent: a.z_max - a.z_min,
                support_count: a.count,
            }
        })
        .filter(|d| d.vertical_extent >= params.min_vertical_extent)
        .collect();
    out.sort_by(|a, b| a.center_x.total_cmp(&b.center_x).then(a.center_y.total_cmp(&b.center_y)));
    out
}

/// Summary of one cluster or merged detection.
#[derive(Debug, Clone)]
struct Accum {
    count: usize,
    sx: f64,
    sy: f64,
    /// Horizontal RMS about the centroid, computed before any merging.
    rms: f64,
    z_min: f64,
    z_max: f64,
}

impl Accum {
    fn centroid(&self) -> (f64, f64) {
        let n = self.count as f64;
        (self.sx / n, self.sy / n)
    }

    fn horizontal_rms(&self) -> f64 {
        self.rms
    }

    fn absorb(&mut self, other: &Accum) {
        self.count += other.count;
        self.sx += other.sx;
        self.sy += other.sy;
        self.z_min = self.z_min.min(other.z_min);
        self.z_max = self.z_max.max(other.z_max);
    }
}

fn summarize(cloud: &PointCloud, cells: &HashMap<Cell, (CellStats, Vec<u32>)>, members: &[Cell]) -> Accum {
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    let (mut z_min, mut z_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in members {
        let (stats, idx) = &cells[c];
        z_min = z_min.min(stats.z_min);
        z_max = z_max.max(stats.z_max);
        for &i in idx {
            let p = cloud.points[i as usize];
            sx += p.x;
            sy += p.y;
            count += 1;
        }
    }
    let (cx, cy) = (sx / count as f64, sy / count as f64);
    let mut dev = 0.0;
    for c in members {
        for &i in &cells[c].1 {
            let p = cloud.points[i as usize];
            dev += (p.x - cx).powi(2) + (p.y - cy).powi(2);
        }
    }
    Accum { count, sx, sy, rms: (dev / count as f64).sqrt(), z_min, z_max }
}

/// Repeatedly merges the closest pair of detections whose centroids lie
/// within `radius` until no such pair remains.
fn merge_close(mut dets: Vec<Accum>, radius: f64) -> Vec<Accum> {
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, a) in dets.iter().enumerate() {
            let (xi, yi) = a.centroid();
            for (j, b) in dets.iter().enumerate().skip(i + 1) {
                let (xj, yj) = b.centroid();
                let d = (xi - xj).hypot(yi - yj);
                if d <= radius && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                let other = dets.remove(j);
                dets[i].absorb(&other);
            }
            None => return dets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `(detection index, pole id)` pairs in matching order.
    pub pairs: Vec<(usize, u64)>,
    pub precision: f64,
    pub recall: f64,
}

impl Association {
    pub fn pole_of(&self, detection: usize) -> Option<u64> {
        self.pairs.iter().find(|(d, _)| *d == detection).map(|(_, id)| *id)
    }
}

/// Greedy one-to-one matching in ascending distance; pairs farther than
/// `tol` stay unmatched. Ties are broken by (detection index, pole id).
pub fn associate_detections(detections: &[PoleDetection], truth: &GroundTruth, tol: f64) -> Result<Association> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("association tolerance must be positive, got {tol}")));
    }
    let mut cand: Vec<(f64, usize, u64)> = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (&id, &(x, y)) in &truth.centers {
            let dist = (d.center_x - x).hypot(d.center_y - y);
            if dist <= tol {
                cand.push((dist, i, id));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut truth_used: BTreeMap<u64, bool> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (_, i, id) in cand {
        if det_used[i] || truth_used.contains_key(&id) {
            continue;
        }
        det_used[i] = true;
        truth_used.insert(id, true);
        pairs.push((i, id));
    }
    let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    Ok(Association {
        precision: ratio(pairs.len(), detections.len()),
        recall: ratio(pairs.len(), truth.len()),
        pairs,
    })
}

/// One row of the detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub base_z: f64,
    pub extent: f64,
    pub support: usize,
}

impl DetectionRecord {
    pub fn to_detection(&self) -> PoleDetection {
        PoleDetection {
            center_x: self.x,
            center_y: self.y,
            base_z: self.base_z,
            vertical_extent: self.extent,
            support_count: self.support,
        }
    }
}

/// Assigns ids: associated detections take their pole id, the rest are
/// numbered sequentially after the largest known id (or from 0 when there is
/// no ground truth).
pub fn label_detections(detections: &[PoleDetection], association: Option<&Association>) -> Vec<DetectionRecord> {
    let mut next = association
        .and_then(|a| a.pairs.iter().map(|(_, id)| id + 1).max())
        .unwrap_or(0);
    detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let id = match association.and_then(|a| a.pole_of(i)) {
                Some(id) => id,
                None => {
                    next += 1;
                    next - 1
                }
            };
            DetectionRecord {
                id,
                x: d.center_x,
                y: d.center_y,
                base_z: d.base_z,
                extent: d.vertical_extent,
                support: d.support_count,
            }
        })
        .collect()
}

pub fn write_detections(records: &[DetectionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::Json { path: path.into(), source: e })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}
