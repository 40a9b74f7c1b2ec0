//! Binary tensor record format shared by every checkpoint file.
//!
//! Stream layout: magic bytes `CFT1`, then tensor records until EOF. Each
//! record is `name_len: u64 LE`, `name: UTF-8`, `rank: u64 LE`,
//! `dims: rank x u64 LE`, `data: prod(dims) x f32 LE`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CFT1_MAGIC: &[u8; 4] = b"CFT1";

// Guards against garbage headers producing huge allocations.
const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 16;
const MAX_NUMEL: u64 = 1 << 32;

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_tensor_record<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, shape.len() as u64)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_record<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = read_u64(r)?;
    if name_len > MAX_NAME_LEN {
        return Err(Error::Format(format!("tensor record name length {name_len} too large")));
    }
    let mut name_buf = vec![0u8; name_len as usize];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Format("tensor record name is not UTF-8".into()))?;
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("tensor record rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        numel = numel.saturating_mul(d.max(1));
        shape.push(d as usize);
    }
    if numel > MAX_NUMEL {
        return Err(Error::Format(format!("tensor record with {numel} elements too large")));
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((name, shape, data))
}

/// Write a full `CFT1` stream: magic followed by the given named tensors.
pub fn write_cft1<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CFT1_MAGIC)?;
    for (name, t) in tensors {
        write_tensor_record(w, name, t.shape(), &t.data())?;
    }
    Ok(())
}

/// Read a `CFT1` stream until EOF.
pub fn read_cft1<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CFT1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected CFT1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut out = Vec::new();
    loop {
        // Probe for EOF before committing to a record.
        let mut first = [0u8; 8];
        match r.read(&mut first)? {
            0 => break,
            n if n < 8 => {
                let mut rest = first[n..].to_vec();
                r.read_exact(&mut rest)
                    .map_err(|_| Error::Format("truncated tensor record header".into()))?;
                return Err(Error::Format("truncated tensor record header".into()));
            }
            _ => {}
        }
        let name_len = u64::from_le_bytes(first);
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("tensor record name length {name_len} too large")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor record name is not UTF-8".into()))?;
        let rank = read_u64(r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor record rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let count: usize = shape.iter().product();
        if count as u64 > MAX_NUMEL {
            return Err(Error::Format(format!("tensor record with {count} elements too large")));
        }
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}
