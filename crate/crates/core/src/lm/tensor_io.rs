//! On-disk tensor format shared by decoder weights and adapter checkpoints.
//!
//! Layout (all little-endian): the magic bytes `LTNS`, a u32 format version,
//! a u32 rank, `rank` u64 dimension sizes, then the row-major payload as f32.
//! Values compute in f64 in memory and persist as f32; a load/save cycle of a
//! file reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::LmError;

const MAGIC: &[u8; 4] = b"LTNS";
const VERSION: u32 = 1;

fn io_error(path: &Path, message: impl Into<String>) -> LmError {
    LmError::TensorIo {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<(), LmError> {
    let expected: usize = dims.iter().product();
    assert_eq!(expected, data.len(), "dims do not cover the payload");
    let file = File::create(path).map_err(|e| io_error(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| {
        w.write_all(bytes)
            .map_err(|e| io_error(path, e.to_string()))
    };
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        emit(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        emit(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| io_error(path, e.to_string()))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>), LmError> {
    let file = File::open(path).map_err(|e| io_error(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| io_error(path, e.to_string()))?;
    if &magic != MAGIC {
        return Err(io_error(path, "bad magic, not a tensor file"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(io_error(path, format!("unsupported version {version}")));
    }
    let rank = read_u32(&mut r, path)? as usize;
    if rank > 8 {
        return Err(io_error(path, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)
            .map_err(|e| io_error(path, e.to_string()))?;
        dims.push(u64::from_le_bytes(buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)
            .map_err(|e| io_error(path, e.to_string()))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_error(path, e.to_string()))? != 0 {
        return Err(io_error(path, "trailing bytes after payload"));
    }
    Ok((dims, data))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, LmError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| io_error(path, e.to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<(), LmError> {
    let owned;
    let slice = match m.as_slice() {
        Some(s) => s,
        None => {
            owned = m.to_owned();
            owned.as_slice().expect("owned array is contiguous")
        }
    };
    write_tensor(path, &[m.nrows(), m.ncols()], slice)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, LmError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(io_error(path, format!("expected rank 2, got {}", dims.len())));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| io_error(path, e.to_string()))
}

pub fn write_vector(path: &Path, v: ArrayView1<'_, f64>) -> Result<(), LmError> {
    let owned;
    let slice = match v.as_slice() {
        Some(s) => s,
        None => {
            owned = v.to_owned();
            owned.as_slice().expect("owned array is contiguous")
        }
    };
    write_tensor(path, &[v.len()], slice)
}

pub fn read_vector(path: &Path) -> Result<Array1<f64>, LmError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 1 {
        return Err(io_error(path, format!("expected rank 1, got {}", dims.len())));
    }
    Ok(Array1::from_vec(data))
}
