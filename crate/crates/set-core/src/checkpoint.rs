//! Self-describing binary container for named f64 arrays.
//!
//! Layout (all integers little-endian):
//!   magic `SETT` | version u32 | count u32 | per array:
//!   name_len u32, name utf-8, rank u32, extents u64 each, payload f64.
//!
//! Round trips are bit-exact.

use crate::error::DataError;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SETT";
pub const VERSION: u32 = 1;

pub fn write_arrays<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<(), DataError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &value in tensor.data() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_arrays<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Truncated("missing magic".into()))?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| DataError::Truncated("array name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DataError::Corrupt("array name is not utf-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64s(r, numel)
            .map_err(|_| DataError::Truncated(format!("payload of array '{name}'")))?;
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| DataError::Corrupt(format!("array '{name}': {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save_to_path(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arrays(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path(path: &Path) -> Result<Vec<(String, Tensor)>, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_arrays(&mut r)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| DataError::Truncated("u32 field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, DataError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| DataError::Truncated("u64 field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, DataError> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| DataError::Truncated("f64 payload".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<(), DataError> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
