//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "POETCKPT"            8 bytes
//! version               u32
//! repeated until EOF:
//!   name length         u32
//!   name                UTF-8 bytes
//!   rank                u32
//!   dims                rank x u32
//!   payload             prod(dims) x f32
//! ```

use std::io::{self, Read, Write};

use super::{numel, ParamEntry, ParamStore, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type CheckpointEntry = ParamEntry<f32>;

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for e in store.entries() {
        let name = e.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(e.value.len() * 4);
        for v in &e.value {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the next record, or `None` at a clean end of file.
fn read_entry<R: Read>(r: &mut R) -> Result<Option<CheckpointEntry>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut len[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::format("checkpoint", "truncated record header"))
            };
        }
        got += n;
    }
    let name_len = u32::from_le_bytes(len) as usize;
    if name_len > 4096 {
        return Err(Error::format(
            "checkpoint",
            format!("implausible name length {name_len}"),
        ));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(
            "checkpoint",
            format!("{name}: unsupported rank {rank}"),
        ));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<io::Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::format(
            "checkpoint",
            format!("{name}: zero dimension in {shape:?}"),
        ));
    }
    let n = numel(&shape);
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let value = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(ParamEntry { name, shape, value }))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let mut entries = Vec::new();
    while let Some(e) = read_entry(&mut input)? {
        entries.push(e);
    }
    Ok(entries)
}
