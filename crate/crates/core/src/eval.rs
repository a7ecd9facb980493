//! Cross-session retrieval: descriptor databases, L2 ranking, Recall@k and
//! MRR, and the handcrafted shift-search Hamming baseline.
//!
//! For each query, database entries recorded in the query's own session are
//! ineligible. The rest are ordered by ascending distance with ties broken by
//! database index, and the query's rank is the 1-based position of the first
//! entry with the same pole id.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{embed, EncoderParams};
use crate::error::{Error, Result};
use crate::image::PoleImage;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Images encoded per forward call in [`embed_all`].
const EMBED_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub pole_id: u64,
    pub session_id: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    pub dim: usize,
    pub entries: Vec<DbEntry>,
}

impl DescriptorDB {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    /// Appends an entry, enforcing the dimension and `(pole_id, session_id)`
    /// uniqueness.
    pub fn push(&mut self, entry: DbEntry) -> Result<()> {
        if entry.values.len() != self.dim {
            return Err(Error::Shape(format!("descriptor of length {} in a {}-d database", entry.values.len(), self.dim)));
        }
        if self.entries.iter().any(|e| e.pole_id == entry.pole_id && e.session_id == entry.session_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate observation (pole {}, session {})",
                entry.pole_id, entry.session_id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries recorded in `session`, order preserved.
    pub fn session(&self, session: u32) -> DescriptorDB {
        DescriptorDB { dim: self.dim, entries: self.entries.iter().filter(|e| e.session_id == session).cloned().collect() }
    }
}

/// Encodes every observation with the given parameters. The output order
/// matches the input order.
pub fn embed_all<'a, I>(params: &EncoderParams, observations: I) -> Result<DescriptorDB>
where
    I: IntoIterator<Item = (u64, &'a PoleImage)>,
{
    let obs: Vec<(u64, &PoleImage)> = observations.into_iter().collect();
    let mut seen = HashSet::new();
    for (id, img) in &obs {
        if !seen.insert((*id, img.session_id)) {
            return Err(Error::InvalidArgument(format!("duplicate observation (pole {id}, session {})", img.session_id)));
        }
    }
    let mut db = DescriptorDB::new(params.emb_dim);
    for chunk in obs.chunks(EMBED_CHUNK) {
        let pixels: Vec<Vec<f64>> = chunk.iter().map(|(_, img)| img.to_f64()).collect();
        let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
        for ((id, img), d) in chunk.iter().zip(embed(params, &refs)?) {
            db.entries.push(DbEntry {
                pole_id: *id,
                session_id: img.session_id,
                values: d.0.iter().map(|&v| v as f32).collect(),
            });
        }
    }
    Ok(db)
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Database indices sorted by ascending L2 distance to `query`, ties by
/// index.
pub fn rank(query: &[f32], db: &DescriptorDB) -> Result<Vec<usize>> {
    if query.len() != db.dim {
        return Err(Error::Shape(format!("query of length {} against a {}-d database", query.len(), db.dim)));
    }
    let dist: Vec<f64> = db.entries.iter().map(|e| squared_l2(query, &e.values)).collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub pole_id: u64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keys "1", "5", "10".
    pub recall_at: BTreeMap<String, f64>,
    pub mrr: f64,
    pub per_query_rank: Vec<QueryRank>,
}

impl EvalReport {
    pub fn from_ranks(per_query_rank: Vec<QueryRank>) -> Self {
        let n = per_query_rank.len().max(1) as f64;
        let recall_at = RECALL_KS
            .iter()
            .map(|&k| (k.to_string(), per_query_rank.iter().filter(|q| q.rank <= k).count() as f64 / n))
            .collect();
        let mrr = per_query_rank.iter().map(|q| 1.0 / q.rank as f64).sum::<f64>() / n;
        Self { recall_at, mrr, per_query_rank }
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at[&k.to_string()]
    }
}

/// Identity of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsKey {
    pub pole_id: u64,
    pub session_id: u32,
}

/// Shared ranking core: `dist(q, d)` is the distance between query `q` and
/// database entry `d`.
pub fn evaluate_with(queries: &[ObsKey], db: &[ObsKey], mut dist: impl FnMut(usize, usize) -> f64) -> Result<EvalReport> {
    let mut ranks = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut eligible: Vec<(f64, usize)> = db
            .iter()
            .enumerate()
            .filter(|(_, d)| d.session_id != q.session_id)
            .map(|(di, _)| (dist(qi, di), di))
            .collect();
        eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pos = eligible
            .iter()
            .position(|&(_, di)| db[di].pole_id == q.pole_id)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "query pole {} (session {}) has no database entry in another session",
                    q.pole_id, q.session_id
                ))
            })?;
        ranks.push(QueryRank { pole_id: q.pole_id, rank: pos + 1 });
    }
    Ok(EvalReport::from_ranks(ranks))
}

fn keys(db: &DescriptorDB) -> Vec<ObsKey> {
    db.entries.iter().map(|e| ObsKey { pole_id: e.pole_id, session_id: e.session_id }).collect()
}

/// Descriptor matcher: L2 distance between stored descriptors.
pub fn evaluate_descriptors(queries: &DescriptorDB, db: &DescriptorDB) -> Result<EvalReport> {
    if queries.dim != db.dim {
        return Err(Error::Shape(format!("query dim {} != database dim {}", queries.dim, db.dim)));
    }
    evaluate_with(&keys(queries), &keys(db), |q, d| {
        squared_l2(&queries.entries[q].values, &db.entries[d].values)
    })
}

/// Column-packed binary image for fast shift search: column `c` occupies
/// `words` consecutive `u64`s holding its rows as bits.
#[derive(Debug, Clone)]
pub struct PackedImage {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
}

impl PackedImage {
    pub fn new(img: &PoleImage) -> Self {
        let (rows, cols) = (img.rows(), img.cols());
        let words = rows.div_ceil(64);
        let mut bits = vec![0u64; cols * words];
        for r in 0..rows {
            for c in 0..cols {
                if img.get(r, c) {
                    bits[c * words + r / 64] |= 1 << (r % 64);
                }
            }
        }
        Self { rows, cols, words, bits }
    }

    /// Minimum Hamming distance over circular column shifts of `other`,
    /// as a count of differing cells.
    fn min_shift_hamming(&self, other: &PackedImage) -> u64 {
        let (cols, w) = (self.cols, self.words);
        let mut best = u64::MAX;
        for s in 0..cols {
            let mut acc = 0u64;
            for c in 0..cols {
                let oc = (c + cols - s) % cols;
                let a = &self.bits[c * w..(c + 1) * w];
                let b = &other.bits[oc * w..(oc + 1) * w];
                for (x, y) in a.iter().zip(b) {
                    acc += u64::from((x ^ y).count_ones());
                }
                if acc >= best {
                    break;
                }
            }
            best = best.min(acc);
            if best == 0 {
                break;
            }
        }
        best
    }

    pub fn distance(&self, other: &PackedImage) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::InvalidArgument(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.min_shift_hamming(other) as f64 / (self.rows * self.cols) as f64)
    }
}

/// Fraction of differing cells after the best circular column alignment of
/// `b` against `a`.
pub fn iris_baseline_distance(a: &PoleImage, b: &PoleImage) -> Result<f64> {
    PackedImage::new(a).distance(&PackedImage::new(b))
}

fn image_key(img: &PoleImage) -> Result<ObsKey> {
    let pole_id = img
        .pole_id
        .ok_or_else(|| Error::InvalidArgument("baseline evaluation needs images with pole ids".into()))?;
    Ok(ObsKey { pole_id, session_id: img.session_id })
}

/// Baseline matcher over raw (non-canonicalized) images.
pub fn evaluate_baseline(queries: &[PoleImage], db: &[PoleImage]) -> Result<EvalReport> {
    let qk = queries.iter().map(image_key).collect::<Result<Vec<_>>>()?;
    let dk = db.iter().map(image_key).collect::<Result<Vec<_>>>()?;
    if let (Some(q), Some(d)) = (queries.first(), db.first()) {
        if (q.rows(), q.cols()) != (d.rows(), d.cols()) {
            return Err(Error::InvalidArgument("query and database images differ in size".into()));
        }
    }
    let qp: Vec<PackedImage> = queries.iter().map(PackedImage::new).collect();
    let dp: Vec<PackedImage> = db.iter().map(PackedImage::new).collect();
    let mut failure = None;
    let report = evaluate_with(&qk, &dk, |q, d| match qp[q].distance(&dp[d]) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::INFINITY
        }
    });
    match failure {
        Some(e) => Err(e),
        None => report,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Descriptor,
    Baseline,
}

const DB_MAGIC: &[u8; 4] = b"PIDB";
const DB_VERSION: u32 = 1;
const DB_HEADER: usize = 16;

pub fn encode_db(db: &DescriptorDB) -> Vec<u8> {
    let mut buf = Vec::with_capacity(DB_HEADER + db.len() * (12 + 4 * db.dim));
    buf.extend(DB_MAGIC);
    buf.extend(DB_VERSION.to_le_bytes());
    buf.extend((db.dim as u32).to_le_bytes());
    buf.extend((db.len() as u32).to_le_bytes());
    for e in &db.entries {
        buf.extend(e.pole_id.to_le_bytes());
        buf.extend(e.session_id.to_le_bytes());
        for v in &e.values {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_db(data: &[u8], path: &Path) -> Result<DescriptorDB> {
    if data.len() < DB_HEADER {
        return Err(Error::format(path, format!("truncated header: expected {DB_HEADER} bytes, found {}", data.len())));
    }
    if &data[..4] != DB_MAGIC {
        return Err(Error::format(path, "wrong magic, expected PIDB"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(data[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DB_VERSION {
        return Err(Error::format(path, format!("unsupported database version {version}")));
    }
    let dim = u32_at(8) as usize;
    let count = u32_at(12) as usize;
    let record = 12 + 4 * dim;
    let expected = DB_HEADER + count * record;
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "size mismatch: header declares {count} records of dim {dim} ({expected} bytes), file has {} bytes",
                data.len()
            ),
        ));
    }
    let mut db = DescriptorDB::new(dim);
    for rec in data[DB_HEADER..].chunks_exact(record) {
        let pole_id = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let session_id = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        let values = rec[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        db.push(DbEntry { pole_id, session_id, values }).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(db)
}

pub fn write_db(db: &DescriptorDB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_db(db)).map_err(|e| Error::io(path, e))
}

pub fn read_db(path: impl AsRef<Path>) -> Result<DescriptorDB> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_db(&data, path)
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Json { path: path.into(), source: e })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}
