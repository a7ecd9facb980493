//! Pole-centric binary occupancy images over (θ, z).
//!
//! Row 0 is the lowest z bin; column `c` covers θ ∈ [c·Δθ, (c+1)·Δθ) with θ
//! measured counter-clockwise from +x. The horizontal range `r` only decides
//! whether a point is inside the image radius.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::detect::PoleDetection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    pub r: f64,
    /// Degrees in [0, 360).
    pub theta: f64,
    /// Height above the pole base.
    pub z: f64,
}

/// Pole-centric polar coordinates of `p`. A point on the axis gets θ = 0.
pub fn to_polar(p: Point3, pole: &PoleDetection) -> PolarPoint {
    let dx = p.x - pole.center_x;
    let dy = p.y - pole.center_y;
    let r = dx.hypot(dy);
    let theta = if r == 0.0 { 0.0 } else { wrap_degrees(dy.atan2(dx).to_degrees()) };
    PolarPoint { r, theta, z: p.z - pole.base_z }
}

fn wrap_degrees(mut deg: f64) -> f64 {
    if deg < 0.0 {
        deg += 360.0;
    }
    if deg >= 360.0 {
        deg -= 360.0;
    }
    deg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoleImageParams {
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub canonicalize: bool,
}

impl Default for PoleImageParams {
    fn default() -> Self {
        Self { radius: 3.0, z_min: 0.0, z_max: 8.0, rows: 80, cols: 360, canonicalize: true }
    }
}

impl PoleImageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config("image.radius must be positive".into()));
        }
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_max > self.z_min) {
            return Err(Error::Config("image.z_max must exceed image.z_min".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("image.rows and image.cols must be at least 1".into()));
        }
        Ok(())
    }

    fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / self.rows as f64
    }

    fn dtheta(&self) -> f64 {
        360.0 / self.cols as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoleImage {
    /// Row-major `rows × cols`, entries 0 or 1.
    grid: Vec<u8>,
    pub pole_id: Option<u64>,
    pub session_id: u32,
    pub params: PoleImageParams,
}

impl PoleImage {
    pub fn zeros(params: PoleImageParams, pole_id: Option<u64>, session_id: u32) -> Self {
        Self { grid: vec![0; params.rows * params.cols], pole_id, session_id, params }
    }

    /// Builds an image from a grid; nonzero entries become 1.
    pub fn from_grid(grid: Vec<u8>, params: PoleImageParams, pole_id: Option<u64>, session_id: u32) -> Result<Self> {
        if grid.len() != params.rows * params.cols {
            return Err(Error::Shape(format!(
                "grid has {} cells, params declare {}x{}",
                grid.len(),
                params.rows,
                params.cols
            )));
        }
        let grid = grid.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self { grid, pole_id, session_id, params })
    }

    pub fn rows(&self) -> usize {
        self.params.rows
    }

    pub fn cols(&self) -> usize {
        self.params.cols
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.params.cols + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, occupied: bool) {
        self.grid[row * self.params.cols + col] = u8::from(occupied);
    }

    pub fn occupied(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    /// Circular column shift: output column `c` takes input column
    /// `(c − s) mod cols`, so content moves towards larger θ for positive `s`.
    pub fn shifted(&self, s: i64) -> Self {
        let cols = self.params.cols;
        let s = s.rem_euclid(cols as i64) as usize;
        let mut out = self.clone();
        if s == 0 {
            return out;
        }
        for (src, dst) in self.grid.chunks_exact(cols).zip(out.grid.chunks_exact_mut(cols)) {
            dst[s..].copy_from_slice(&src[..cols - s]);
            dst[..s].copy_from_slice(&src[cols - s..]);
        }
        out
    }

    /// Pixel values as 0.0 / 1.0 for the encoder.
    pub fn to_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Rasterizes the neighbourhood of `pole` into a Pole-Image, canonicalized
/// when `params.canonicalize` is set.
pub fn render_pole_image(cloud: &PointCloud, pole: &PoleDetection, params: &PoleImageParams) -> PoleImage {
    let mut img = PoleImage::zeros(params.clone(), None, cloud.session_id);
    let (dz, dtheta) = (params.dz(), params.dtheta());
    let r2 = params.radius * params.radius;
    for &p in &cloud.points {
        // Cheap reject before the trigonometry.
        let (dx, dy) = (p.x - pole.center_x, p.y - pole.center_y);
        if dx * dx + dy * dy > r2 {
            continue;
        }
        let q = to_polar(p, pole);
        if q.r > params.radius || q.z < params.z_min || q.z >= params.z_max {
            continue;
        }
        let row = (((q.z - params.z_min) / dz).floor() as usize).min(params.rows - 1);
        let col = ((q.theta / dtheta).floor() as usize).min(params.cols - 1);
        img.set(row, col, true);
    }
    if params.canonicalize {
        canonicalize(&img)
    } else {
        img
    }
}

/// Circular mean in degrees `[0, 360)` of the occupied cells' column-center
/// angles, or `None` when the resultant length is at most 1e-9.
pub fn circular_mean_deg(img: &PoleImage) -> Option<f64> {
    let cols = img.cols();
    let dtheta = img.params.dtheta();
    let mut counts = vec![0u32; cols];
    for row in img.grid.chunks_exact(cols) {
        for (c, &v) in row.iter().enumerate() {
            counts[c] += u32::from(v);
        }
    }
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let a = ((c as f64 + 0.5) * dtheta).to_radians();
            sx += n as f64 * a.cos();
            sy += n as f64 * a.sin();
        }
    }
    if sx.hypot(sy) <= 1e-9 {
        return None;
    }
    Some(wrap_degrees(sy.atan2(sx).to_degrees()))
}

/// Shift that brings the occupied-mass circular mean angle into column 0,
/// or `None` when the resultant is below 1e-9 (empty or balanced image).
pub fn canonical_shift(img: &PoleImage) -> Option<i64> {
    let mean = circular_mean_deg(img)?;
    // Column whose center is nearest to the mean angle.
    let col = (mean / img.params.dtheta() - 0.5).round() as i64;
    Some(-col.rem_euclid(img.cols() as i64))
}

pub fn canonicalize(img: &PoleImage) -> PoleImage {
    match canonical_shift(img) {
        Some(s) => img.shifted(s),
        None => img.clone(),
    }
}

fn params_comment(p: &PoleImageParams) -> String {
    format!(
        "radius={} z_min={} z_max={} rows={} cols={} canonicalize={}",
        p.radius,
        p.z_min,
        p.z_max,
        p.rows,
        p.cols,
        u8::from(p.canonicalize)
    )
}

/// Writes a binary `P5` PGM (occupied = 255) with the pole id, session id and
/// image parameters in comment lines.
pub fn write_pgm(img: &PoleImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = String::from("P5\n");
    match img.pole_id {
        Some(id) => writeln!(header, "# pole_id {id}").unwrap(),
        None => writeln!(header, "# pole_id none").unwrap(),
    }
    writeln!(header, "# session_id {}", img.session_id).unwrap();
    writeln!(header, "# params {}", params_comment(&img.params)).unwrap();
    writeln!(header, "{} {}\n255", img.cols(), img.rows()).unwrap();
    let mut bytes = header.into_bytes();
    bytes.extend(img.grid.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn parse_params(path: &Path, text: &str) -> Result<PoleImageParams> {
    let mut p = PoleImageParams::default();
    for kv in text.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad params entry `{kv}`")))?;
        let bad = || Error::format(path, format!("bad value for `{k}`: `{v}`"));
        match k {
            "radius" => p.radius = v.parse().map_err(|_| bad())?,
            "z_min" => p.z_min = v.parse().map_err(|_| bad())?,
            "z_max" => p.z_max = v.parse().map_err(|_| bad())?,
            "rows" => p.rows = v.parse().map_err(|_| bad())?,
            "cols" => p.cols = v.parse().map_err(|_| bad())?,
            "canonicalize" => p.canonicalize = v != "0",
            _ => return Err(Error::format(path, format!("unknown params key `{k}`"))),
        }
    }
    Ok(p)
}

/// Reads a `P5` PGM written by [`write_pgm`]. Any nonzero pixel is occupied.
/// Files without metadata comments get default parameters sized to the
/// image, no pole id and session 0.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<PoleImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::format(path, "unsupported magic (expected binary P5)"));
    }
    let mut pos = 2;
    let mut tokens: Vec<String> = Vec::new();
    let mut pole_id = None;
    let mut session_id = 0u32;
    let mut params: Option<PoleImageParams> = None;
    // Header: width, height, maxval with interleaved comments, then exactly
    // one whitespace byte before the raster.
    while tokens.len() < 3 {
        match data.get(pos) {
            None => return Err(Error::format(path, "truncated PGM header")),
            Some(b'#') => {
                let end = data[pos..].iter().position(|&b| b == b'\n').map_or(data.len(), |e| pos + e);
                let line = String::from_utf8_lossy(&data[pos + 1..end]).trim().to_string();
                if let Some(rest) = line.strip_prefix("pole_id ") {
                    pole_id = match rest.trim() {
                        "none" => None,
                        v => Some(v.parse().map_err(|_| Error::format(path, format!("bad pole_id `{v}`")))?),
                    };
                } else if let Some(rest) = line.strip_prefix("session_id ") {
                    session_id = rest
                        .trim()
                        .parse()
                        .map_err(|_| Error::format(path, format!("bad session_id `{rest}`")))?;
                } else if let Some(rest) = line.strip_prefix("params ") {
                    params = Some(parse_params(path, rest)?);
                }
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < data.len() && !data[pos].is_ascii_whitespace() && data[pos] != b'#' {
                    pos += 1;
                }
                tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
            }
        }
    }
    pos += 1;
    let num = |t: &str, what: &str| -> Result<usize> {
        t.parse().map_err(|_| Error::format(path, format!("bad {what} `{t}`")))
    };
    let width = num(&tokens[0], "width")?;
    let height = num(&tokens[1], "height")?;
    let maxval = num(&tokens[2], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let params = match params {
        Some(p) => {
            if p.cols != width || p.rows != height {
                return Err(Error::format(
                    path,
                    format!("raster is {width}x{height} but params declare {}x{}", p.cols, p.rows),
                ));
            }
            p
        }
        None => PoleImageParams { rows: height, cols: width, ..PoleImageParams::default() },
    };
    let raster = data.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(Error::format(
            path,
            format!("expected {} raster bytes, found {}", width * height, raster.len()),
        ));
    }
    PoleImage::from_grid(raster.to_vec(), params, pole_id, session_id)
}

/// One row of the dataset manifest (`pole_id<TAB>session_id<TAB>image_path`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub pole_id: u64,
    pub session_id: u32,
    pub image_path: PathBuf,
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in rows {
        writeln!(text, "{}\t{}\t{}", r.pole_id, r.session_id, r.image_path.display()).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest. Relative image paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected pole_id<TAB>session_id<TAB>image_path"));
        }
        let pole_id = f[0].parse().map_err(|_| Error::parse(path, i + 1, format!("bad pole_id `{}`", f[0])))?;
        let session_id = f[1].parse().map_err(|_| Error::parse(path, i + 1, format!("bad session_id `{}`", f[1])))?;
        let p = PathBuf::from(f[2]);
        let image_path = if p.is_relative() { base.join(p) } else { p };
        rows.push(ManifestRow { pole_id, session_id, image_path });
    }
    Ok(rows)
}
