//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HCK1" | version u32 | ontology fingerprint u64
//! header_len u32 | header JSON (head, pooling, dims, step, config echo)
//! n_tensors u32
//! per tensor: name_len u16 | name | ndim u32 | dims u64 * ndim | f32 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Pooling;
use crate::model::{HeadKind, Model, ModelDims};
use crate::ontology::Ontology;

pub const MAGIC: &[u8; 4] = b"HCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, expected HCK1")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint was trained on ontology {found:016x}, this ontology is {expected:016x}")]
    OntologyMismatch { expected: u64, found: u64 },
    #[error("tensor mismatch: {0}")]
    TensorMismatch(String),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub head: HeadKind,
    pub pooling: Pooling,
    pub dims: ModelDims,
    pub step: u64,
    /// Effective configuration of the run that wrote the checkpoint.
    pub config: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &Model<f32>,
    o: &Ontology,
    header: &CheckpointHeader,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&o.fingerprint().to_le_bytes())?;
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let tensors = model.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, o: &Ontology, header: &CheckpointHeader) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, o, header)?;
    w.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint written for ontology `o`. Tensor names and shapes must
/// match the geometry recorded in the header exactly.
pub fn read_checkpoint<R: Read>(mut r: R, o: &Ontology) -> Result<(Model<f32>, CheckpointHeader), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let found = read_u64(&mut r)?;
    if found != o.fingerprint() {
        return Err(CheckpointError::OntologyMismatch {
            expected: o.fingerprint(),
            found,
        });
    }
    let mut json = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut model = Model::<f32>::zeros(header.head, header.pooling, &header.dims, o);
    let n = read_u32(&mut r)? as usize;
    let mut slots = model.tensors_mut();
    if n != slots.len() {
        return Err(CheckpointError::TensorMismatch(format!(
            "{n} tensors in file, model has {}",
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let mut name = vec![0u8; read_u16(&mut r)? as usize];
        r.read_exact(&mut name)?;
        if name != expected_name.as_bytes() {
            return Err(CheckpointError::TensorMismatch(format!(
                "expected tensor {expected_name}, found {}",
                String::from_utf8_lossy(&name)
            )));
        }
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != slot.shape() {
            return Err(CheckpointError::TensorMismatch(format!(
                "{expected_name} has shape {shape:?} in file, model expects {:?}",
                slot.shape()
            )));
        }
        let mut buf = vec![0u8; slot.len() * 4];
        r.read_exact(&mut buf)?;
        for (dst, chunk) in slot.iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    drop(slots);
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::TensorMismatch("trailing bytes after last tensor".into()));
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path, o: &Ontology) -> Result<(Model<f32>, CheckpointHeader), CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?), o)
}
