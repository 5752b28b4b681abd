//! Flat binary checkpoint format for named float arrays.
//!
//! Layout, all integers 64-bit little-endian:
//!
//! ```text
//! magic "UDK1"
//! u64   array count
//! per array:
//!   u64   name byte length
//!   [u8]  UTF-8 name
//!   u64   rank
//!   u64 x rank   dims
//!   f32 x prod(dims)   row-major payload, little-endian
//! ```
//!
//! Values are stored at 32-bit precision; loading widens back to f64, so
//! `load(save(x))` is the identity exactly when `x` round-trips through
//! f32.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"UDK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes: expected \"UDK1\"")]
    BadMagic,
    #[error("array name is not valid UTF-8")]
    BadName,
    #[error("checkpoint ends in the middle of {context}")]
    Truncated { context: &'static str },
}

/// Write named tensors in iteration order.
pub fn save_checkpoint<'a>(
    path: &Path,
    arrays: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for (name, tensor) in arrays {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every named tensor, in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }

    let count = read_u64(&mut r, "array count")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "array name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;

        let rank = read_u64(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            read_exact(&mut r, &mut buf, "float payload")?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        arrays.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(arrays)
}

fn read_exact(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u64(r: &mut impl Read, context: &'static str) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, context)?;
    Ok(u64::from_le_bytes(buf))
}
