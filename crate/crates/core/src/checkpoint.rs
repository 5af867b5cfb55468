//! Binary parameter container.
//!
//! Layout: magic `GEVT`, `u32` version, then until end of file one record
//! per tensor: `u32` name length, UTF-8 name, `u32` rank, rank × `u32`
//! dims, then the values as `f32`. All integers and floats little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::layers::Parameters;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GEVT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed record: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {}", .0.join("; "))]
    Mismatch(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("{what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|e| CheckpointError::Malformed(format!("name: {e}")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed(name.clone()))?, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn records<T: Scalar>(params: &impl Parameters<T>) -> Vec<Record> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| {
        out.push(Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        })
    });
    out
}

pub fn save<T: Scalar>(params: &impl Parameters<T>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(&records(params));
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Overwrites every parameter from `records`. Names and shapes must match
/// exactly; all mismatches are reported together.
pub fn apply<T: Scalar>(params: &mut impl Parameters<T>, records: &[Record]) -> Result<(), CheckpointError> {
    let by_name: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut problems = Vec::new();
    let mut seen = 0;
    params.visit("", &mut |name, t| match by_name.get(name) {
        None => problems.push(format!("missing tensor {name}")),
        Some(r) if r.shape != t.shape() => {
            seen += 1;
            problems.push(format!("{name}: checkpoint shape {:?}, model shape {:?}", r.shape, t.shape()))
        }
        Some(_) => seen += 1,
    });
    if seen < records.len() {
        let mut known = Vec::new();
        params.visit("", &mut |name, _| known.push(name.to_string()));
        for r in records {
            if !known.contains(&r.name) {
                problems.push(format!("unexpected tensor {}", r.name));
            }
        }
    }
    if !problems.is_empty() {
        return Err(CheckpointError::Mismatch(problems));
    }
    params.visit_mut("", &mut |name, t| {
        let r = by_name[name];
        *t = Tensor::param(&r.shape, r.data.iter().map(|&v| s(v as f64)).collect()).unwrap();
    });
    Ok(())
}

pub fn load<T: Scalar>(params: &mut impl Parameters<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    apply(params, &decode(&bytes)?)
}
