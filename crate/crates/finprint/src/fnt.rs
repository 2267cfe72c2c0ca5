//! The `FNT1` flat tensor file format.
//!
//! Layout: magic bytes `FNT1`, little-endian u32 rank, one little-endian u32
//! per dimension, then the values as little-endian f64 in row-major order.
//! The format is bit-exact: `read_tensor(write_tensor(x)) == x` down to the
//! last bit, which is what makes dataset directories and checkpoints
//! byte-reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FNT1";

/// A dense row-major f64 tensor with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Errors if `product(dims) != data.len()`.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Contract(format!(
                "tensor dims {:?} imply {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Write a tensor to `path`; see the module docs for the byte layout.
pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(Error::Contract(format!(
            "tensor dims {:?} imply {} values, got {}",
            dims,
            expect,
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, dims, data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the FNT1 encoding to an arbitrary sink (used inline by checkpoints).
pub fn write_tensor_to(w: &mut impl Write, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r).map_err(|msg| Error::corrupt(path, msg))
}

/// Read one FNT1 blob from a stream. Returns a message on malformed input.
pub fn read_tensor_from(r: &mut impl Read) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if magic != MAGIC {
        return Err(format!("bad magic {:?}, expected FNT1", magic));
    }
    let rank = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0f64; n];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|e| format!("truncated values: {e}"))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor { dims, data })
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, String> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| format!("truncated header: {e}"))?;
    Ok(u32::from_le_bytes(buf))
}
