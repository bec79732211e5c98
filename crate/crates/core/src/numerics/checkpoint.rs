//! Flat binary container for named tensors.
//!
//! Layout: magic `SGS1`, then per entry: name length (u32 LE), UTF-8 name,
//! rank (u32 LE), each dimension (u32 LE), and the values as f64 LE. Entries
//! run to end of file. Adam moments are stored as `<name>.m1` / `<name>.m2`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGS1";

pub fn write_entries<W: Write>(out: &mut W, entries: &[(String, &Tensor)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, tensor) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::data("checkpoint shorter than its magic"))?;
    if &magic != MAGIC {
        return Err(Error::data(format!("bad checkpoint magic {magic:?}")));
    }
    let mut entries = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur)? as usize;
        if cur.len() < name_len {
            return Err(Error::data("truncated checkpoint entry name"));
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| Error::data("checkpoint entry name is not UTF-8"))?
            .to_string();
        cur = &cur[name_len..];
        let rank = read_u32(&mut cur)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut cur).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if cur.len() < numel * 8 {
            return Err(Error::data(format!("truncated values for entry {name}")));
        }
        let data = cur[..numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cur = &cur[numel * 8..];
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::data(format!("entry {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::data("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

/// Serializes parameter values, optionally with Adam moments, under `prefix`.
pub fn param_entries(params: &ParamSet, prefix: &str, with_moments: bool) -> Vec<(String, Tensor)> {
    let mut entries = Vec::new();
    for p in params.iter() {
        let name = format!("{prefix}{}", p.name);
        entries.push((name.clone(), p.value.clone()));
        if with_moments {
            let shape = p.value.shape();
            entries.push((format!("{name}.m1"), Tensor::from_raw(shape.to_vec(), p.m1.clone())));
            entries.push((format!("{name}.m2"), Tensor::from_raw(shape.to_vec(), p.m2.clone())));
        }
    }
    entries
}

/// Overwrites every parameter in `params` from `entries` (looked up under
/// `prefix`). Moments are restored when present.
pub fn load_params(params: &mut ParamSet, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
    let lookup = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    for p in params.as_mut_slice() {
        let key = format!("{prefix}{}", p.name);
        let t = lookup(&key).ok_or_else(|| Error::data(format!("checkpoint lacks {key}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::data(format!(
                "checkpoint entry {key} has shape {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        if let (Some(m1), Some(m2)) = (lookup(&format!("{key}.m1")), lookup(&format!("{key}.m2"))) {
            p.m1 = m1.data().to_vec();
            p.m2 = m2.data().to_vec();
        }
    }
    Ok(())
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    let mut buf = Vec::new();
    write_entries(&mut buf, &refs).expect("writing to a Vec cannot fail");
    buf
}
