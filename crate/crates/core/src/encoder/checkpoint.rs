//! Binary checkpoints.
//!
//! ```text
//! "PICK"  u32 version  u32 emb_dim
//! repeated until EOF:
//!   u32 name_len  name (UTF-8)  u32 rank  rank × u32 dims  values (f64 LE)
//! ```
//!
//! Encoder tensors come first in canonical order, followed by an
//! `input_shape` tensor and any extra tensors (optimizer moments, SL
//! calibration) under their own names.

use std::path::Path;

use crate::encoder::{EncoderParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PICK";
const VERSION: u32 = 1;
const INPUT_SHAPE: &str = "input_shape";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    /// Optimizer state and other named tensors, in file order.
    pub extra: Vec<Tensor>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|t| t.name == name)
    }
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend((t.name.len() as u32).to_le_bytes());
    buf.extend(t.name.as_bytes());
    buf.extend((t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        buf.extend((d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend(v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let mut buf = Vec::with_capacity(16 + 8 * p.num_params());
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((p.emb_dim as u32).to_le_bytes());
    for t in &p.tensors {
        push_tensor(&mut buf, t);
    }
    let shape = Tensor {
        name: INPUT_SHAPE.into(),
        shape: vec![2],
        data: vec![p.input_shape.0 as f64, p.input_shape.1 as f64],
    };
    push_tensor(&mut buf, &shape);
    for t in &ckpt.extra {
        push_tensor(&mut buf, t);
    }
    buf
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.data.len() - self.pos
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn decode_checkpoint(data: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { data, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "wrong magic, expected PICK"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let emb_dim = r.u32("emb_dim")? as usize;
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, &format!("values of `{name}`"))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { name, shape, data });
    }

    let shape_pos = tensors
        .iter()
        .position(|t| t.name == INPUT_SHAPE)
        .ok_or_else(|| Error::format(path, "missing input_shape tensor"))?;
    let shape_t = tensors.remove(shape_pos);
    if shape_t.data.len() != 2 {
        return Err(Error::format(path, "input_shape must hold two values"));
    }
    let input_shape = (shape_t.data[0] as usize, shape_t.data[1] as usize);
    let extra = tensors.split_off(10.min(tensors.len()));
    let params = EncoderParams { input_shape, emb_dim, tensors };
    params.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint { params, extra })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&data, path)
}
