//! Parameter checkpoint file.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes   b"TINYDET\0"
//! version u32       currently 1
//! count   u32       number of parameter records
//! then per parameter:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rank     u32
//!   extents  rank x u32
//!   values   product(extents) x f32, raw little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TINYDET\0";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &ext in shape {
            w.write_all(&(ext as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[derive(Debug)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint file)",
            path.display()
        )));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let count = read_u32(&mut r).map_err(io_err)?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(io_err)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF8 name", path.display())))?;
        let rank = read_u32(&mut r).map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(io_err)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = vec![0f32; n];
        let mut buf = [0u8; 4];
        for v in values.iter_mut() {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(Record { name, shape, values });
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
