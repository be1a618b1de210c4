//! EMB1 embedding container.
//!
//! Little-endian layout: `"EMB1"`, version `u32 = 1`, `d u32`, `seq u32`,
//! `count u64`, then `count` records of `page_id u64`, `lang [u8; 8]`
//! (NUL padded), `n_tokens u32` and `(seq + 1) * d` `f32` values, row-major
//! with the CLS row first.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{EmbeddingMatrix, EmbeddingProvider, EncoderError};
use crate::corpus::Page;

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const LANG_LEN: usize = 8;

fn lang_bytes(lang: &str) -> Result<[u8; LANG_LEN], EncoderError> {
    if !lang.is_ascii() || lang.len() > LANG_LEN || lang.contains('\0') {
        return Err(EncoderError::InvalidRecord(format!(
            "language code {lang:?} must be at most 8 ASCII bytes"
        )));
    }
    let mut out = [0u8; LANG_LEN];
    out[..lang.len()].copy_from_slice(lang.as_bytes());
    Ok(out)
}

/// Writes an EMB1 file. Every matrix must share `(d, seq)`.
pub fn write_embeddings<W: Write>(
    mut w: W,
    d: usize,
    seq: usize,
    records: &[(u64, &str, &EmbeddingMatrix)],
) -> Result<(), EncoderError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(seq as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (page_id, lang, m) in records {
        if m.d() != d || m.seq() != seq {
            return Err(EncoderError::DimensionMismatch(format!(
                "record ({lang}, {page_id}) is {}x{}, file is {}x{d}",
                m.seq() + 1,
                m.d(),
                seq + 1
            )));
        }
        w.write_all(&page_id.to_le_bytes())?;
        w.write_all(&lang_bytes(lang)?)?;
        w.write_all(&(m.n_tokens() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.rows().len() * 4);
        for v in m.rows().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// In-memory EMB1 reader with random access by `(lang, page_id)`.
#[derive(Debug)]
pub struct EmbeddingStore {
    bytes: Vec<u8>,
    d: usize,
    seq: usize,
    offsets: HashMap<(String, u64), usize>,
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

impl EmbeddingStore {
    pub fn open(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, EncoderError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(EncoderError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(EncoderError::TruncatedFile("header".into()));
        }
        let version = read_u32(&bytes, 4);
        if version != VERSION {
            return Err(EncoderError::VersionMismatch(version));
        }
        let d = read_u32(&bytes, 8) as usize;
        let seq = read_u32(&bytes, 12) as usize;
        let count = read_u64(&bytes, 16) as usize;
        let record_len = 8 + LANG_LEN + 4 + (seq + 1) * d * 4;

        let mut offsets = HashMap::with_capacity(count);
        let mut at = HEADER_LEN;
        for i in 0..count {
            if at + record_len > bytes.len() {
                return Err(EncoderError::TruncatedFile(format!("record {i} of {count}")));
            }
            let page_id = read_u64(&bytes, at);
            let raw = &bytes[at + 8..at + 8 + LANG_LEN];
            let end = raw.iter().position(|&b| b == 0).unwrap_or(LANG_LEN);
            let lang = std::str::from_utf8(&raw[..end])
                .map_err(|_| EncoderError::InvalidRecord(format!("record {i}: language not ASCII")))?
                .to_string();
            if offsets.insert((lang.clone(), page_id), at).is_some() {
                return Err(EncoderError::InvalidRecord(format!(
                    "duplicate record ({lang}, {page_id})"
                )));
            }
            at += record_len;
        }
        if at != bytes.len() {
            return Err(EncoderError::InvalidRecord(format!(
                "{} bytes of trailing data",
                bytes.len() - at
            )));
        }
        Ok(Self {
            bytes,
            d,
            seq,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn get(&self, lang: &str, page_id: u64) -> Result<EmbeddingMatrix, EncoderError> {
        let &at = self
            .offsets
            .get(&(lang.to_string(), page_id))
            .ok_or_else(|| EncoderError::MissingPage {
                lang: lang.to_string(),
                page_id,
            })?;
        let n_tokens = read_u32(&self.bytes, at + 8 + LANG_LEN) as usize;
        let data = &self.bytes[at + 8 + LANG_LEN + 4..];
        let n = (self.seq + 1) * self.d;
        let values: Vec<f32> = data[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rows = Array2::from_shape_vec((self.seq + 1, self.d), values)
            .expect("record length checked at open");
        EmbeddingMatrix::new(rows, n_tokens)
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn embed(&self, page: &Page) -> Result<EmbeddingMatrix, EncoderError> {
        self.get(&page.lang, page.page_id)
    }

    fn d(&self) -> usize {
        self.d
    }

    fn seq(&self) -> usize {
        self.seq
    }
}
