//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "CCNT" | version u32 | count u32
//! count x { name_len u32 | name utf-8 | rank u32 | dims u32 x rank | values f32 x prod(dims) }
//! flag u8                       0: no optimizer state, 1: state follows
//! step u64 | lr f64 | epoch u64 | count u32
//! count x { name_len u32 | name | len u32 | m f32 x len | v f32 x len }
//! ```
//!
//! Parameters are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ccnet_core::optim::{AdamState, Moments};
use ccnet_core::{ModelParams, Tensor};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"CCNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ModelParams, optimizer: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, params.len() as u32);
    for (name, p) in params.iter() {
        put_name(&mut out, name);
        put_u32(&mut out, p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, p.tensor.data());
    }
    match optimizer {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            out.extend_from_slice(&s.lr.to_le_bytes());
            out.extend_from_slice(&s.epoch.to_le_bytes());
            put_u32(&mut out, s.moments.len() as u32);
            for (name, m) in &s.moments {
                put_name(&mut out, name);
                put_u32(&mut out, m.m.len() as u32);
                put_f32s(&mut out, &m.m);
                put_f32s(&mut out, &m.v);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(self.path, "parameter name is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(format_err(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| format_err(path, "parameter size overflow"))?;
        let data = r.f32s(n)?;
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let lr = r.f64()?;
            let epoch = r.u64()?;
            let n = r.u32()?;
            let mut moments = BTreeMap::new();
            for _ in 0..n {
                let name = r.name()?;
                let len = r.u32()? as usize;
                let m = r.f32s(len)?;
                let v = r.f32s(len)?;
                if moments.insert(name.clone(), Moments { m, v }).is_some() {
                    return Err(ccnet_core::Error::Integrity(format!(
                        "duplicate optimizer entry `{name}`"
                    ))
                    .into());
                }
            }
            Some(AdamState {
                step,
                lr,
                epoch,
                moments,
            })
        }
        f => return Err(format_err(path, format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { params, optimizer })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, optimizer: Option<&AdamState>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode_checkpoint(params, optimizer)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}
