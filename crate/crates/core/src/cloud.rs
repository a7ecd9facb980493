//! Point clouds and the `PCXYZ` text format.
//!
//! ```text
//! PCXYZ 1 <session_id> <count>
//! x y z
//! ...
//! ```
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so a write/read cycle reproduces every coordinate bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "PCXYZ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub session_id: u32,
}

impl PointCloud {
    pub fn new(session_id: u32) -> Self {
        Self { points: Vec::new(), session_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{MAGIC} {VERSION} {} {}", cloud.session_id, cloud.points.len()).map_err(io)?;
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing PCXYZ header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::parse(path, 1, format!("wrong magic, expected {MAGIC}")));
    }
    if fields.len() != 4 {
        return Err(Error::parse(path, 1, "header must be `PCXYZ <version> <session_id> <count>`"));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad version `{}`", fields[1])))?;
    if version != VERSION {
        return Err(Error::parse(path, 1, format!("unsupported version {version}")));
    }
    let session_id: u32 = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad session id `{}`", fields[2])))?;
    let count: usize = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad point count `{}`", fields[3])))?;

    let mut points = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut xyz = [0.0f64; 3];
        let mut tokens = line.split_whitespace();
        for v in xyz.iter_mut() {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "expected 3 coordinates"))?;
            *v = tok
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("non-numeric token `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite coordinate `{tok}`")));
            }
        }
        if tokens.next().is_some() {
            return Err(Error::parse(path, lineno, "expected 3 coordinates"));
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    if points.len() != count {
        return Err(Error::parse(
            path,
            points.len() + 2,
            format!("header declares {count} points, found {}", points.len()),
        ));
    }
    Ok(PointCloud { points, session_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pcxyz");
        let mut rng = SplitMix64::new(5);
        let cloud = PointCloud {
            session_id: 3,
            points: (0..1000)
                .map(|_| Point3::new(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), rng.normal()))
                .collect(),
        };
        write_cloud(&cloud, &path).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), cloud);
    }

    #[test]
    fn header_only_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pcxyz");
        std::fs::write(&path, "PCXYZ 1 7 0\n").unwrap();
        let cloud = read_cloud(&path).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.session_id, 7);
    }

    #[test]
    fn bad_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pcxyz");
        std::fs::write(&path, "PCXYZ 1 0 4\n0 0 0\n1 1 1\n2 2 2\n3 abc 3\n").unwrap();
        match read_cloud(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pcxyz");
        std::fs::write(&path, "PLY 1 0 0\n").unwrap();
        assert!(matches!(read_cloud(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.pcxyz");
        std::fs::write(&path, "PCXYZ 1 0 2\n0 0 0\n").unwrap();
        assert!(matches!(read_cloud(&path), Err(Error::Parse { .. })));
    }
}
