//! Binary checkpoint: `"FG3D"`, `u32` version, `u32` length + JSON header
//! (architecture, schedule, conditioning mode), `u32` tensor count, then per
//! tensor `u32` rank, `u32` dims and little-endian `f32` values, in declared
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ArchConfig, DenoiserWeights, DiffusionError, ScheduleConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FG3D";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: DenoiserWeights<f32>,
    pub schedule: ScheduleConfig,
    pub conditional: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    schedule: ScheduleConfig,
    conditional: bool,
}

fn bad(msg: impl Into<String>) -> DiffusionError {
    DiffusionError::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, DiffusionError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<(), DiffusionError> {
    let header = Header { arch: ck.weights.arch.clone(), schedule: ck.schedule, conditional: ck.conditional };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    let tensors = ck.weights.tensors();
    put_u32(w, tensors.len() as u32)?;
    for t in tensors {
        put_u32(w, 2)?;
        put_u32(w, t.nrows() as u32)?;
        put_u32(w, t.ncols() as u32)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, DiffusionError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    header.arch.validate().map_err(bad)?;
    let mut weights = DenoiserWeights::<f32>::init(&header.arch, 0);
    let count = get_u32(r)? as usize;
    let mut slots = weights.tensors_mut();
    if count != slots.len() {
        return Err(bad(format!("expected {} tensors, found {count}", slots.len())));
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let rank = get_u32(r)?;
        if rank != 2 {
            return Err(bad(format!("tensor {i}: rank {rank}")));
        }
        let dims = (get_u32(r)? as usize, get_u32(r)? as usize);
        if dims != slot.dim() {
            return Err(bad(format!("tensor {i}: shape {dims:?}, expected {:?}", slot.dim())));
        }
        let mut buf = vec![0u8; dims.0 * dims.1 * 4];
        r.read_exact(&mut buf).map_err(|_| bad(format!("tensor {i}: truncated data")))?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        **slot = Array2::from_shape_vec(dims, vals).expect("sized buffer");
    }
    if !weights.all_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(Checkpoint { weights, schedule: header.schedule, conditional: header.conditional })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), DiffusionError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DiffusionError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
