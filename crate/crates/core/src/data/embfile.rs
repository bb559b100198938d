//! Precomputed item embeddings.
//!
//! Layout (little-endian): `b"FMRL"`, version `u32`, rows `u32`, cols
//! `u32`, `rows·cols` `f32` values row-major, then a `u64` checksum equal
//! to the sum of all preceding bytes modulo 2^64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMB_MAGIC: &[u8; 4] = b"FMRL";
pub const EMB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Data(format!(
                "{rows}x{cols} embeddings given {} values",
                data.len()
            )));
        }
        Ok(Embeddings { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Picks rows in the given order; `None` yields a zero row.
    pub fn reorder(&self, rows: &[Option<usize>]) -> Embeddings {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for r in rows {
            match r {
                Some(i) => data.extend_from_slice(self.row(*i)),
                None => data.extend(std::iter::repeat_n(0.0, self.cols)),
            }
        }
        Embeddings {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.rows, self.cols],
            self.data.iter().map(|&x| T::of(x as f64)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len() + 8);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let sum = byte_sum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Checksum as stored in the file trailer.
    pub fn checksum(&self) -> u64 {
        let bytes = self.encode();
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::format(path, msg);
        if bytes.len() < 24 {
            return Err(err(format!(
                "file is {} bytes, shorter than the 24-byte minimum",
                bytes.len()
            )));
        }
        if &bytes[0..4] != EMB_MAGIC {
            return Err(err(format!(
                "expected magic {:?}, found {:?}",
                EMB_MAGIC,
                &bytes[0..4]
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != EMB_VERSION {
            return Err(err(format!(
                "expected version {EMB_VERSION}, found {version}"
            )));
        }
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let expected = 16 + 4 * rows * cols + 8;
        if bytes.len() != expected {
            return Err(err(format!(
                "expected {expected} bytes for {rows}x{cols}, found {}",
                bytes.len()
            )));
        }
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
        let actual = byte_sum(body);
        if stored != actual {
            return Err(err(format!(
                "expected checksum {stored:#x}, found {actual:#x}"
            )));
        }
        let data = body[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Embeddings { rows, cols, data })
    }
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |s, &b| s.wrapping_add(b as u64))
}

pub fn write_embeddings(path: &Path, e: &Embeddings) -> Result<()> {
    fs::write(path, e.encode()).map_err(|err| Error::io(path, err))
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Embeddings::decode(&bytes, path)
}

/// Reads an embedding file and checks it has one row per catalog item.
pub fn load_embeddings(path: &Path, expected_rows: usize) -> Result<Embeddings> {
    let e = read_embeddings(path)?;
    if e.rows != expected_rows {
        return Err(Error::format(
            path,
            format!(
                "expected {expected_rows} rows (one per item), found {}",
                e.rows
            ),
        ));
    }
    Ok(e)
}
