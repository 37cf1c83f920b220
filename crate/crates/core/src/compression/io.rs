//! Binary calibration dumps and projection files.
//!
//! Calibration: `b"ESACAL1\0"`, then `u32` LE `N`, `d_H`, `layer_index`,
//! then `N·d_H` query floats and `N·d_H` key floats (IEEE-754 `f32`, LE).
//!
//! Projection: `b"ESAPROJ1"`, then `u32` LE `d'`, `d_H`, then `W_q`
//! (`d'×d_H`, row-major), `b_q`, `W_k`, `b_k`.

use std::fs;
use std::path::Path;

use super::{CalibrationSet, LinearMap, ProjectionPair};
use crate::error::{EsaError, Result};
use crate::tensor::Matrix;

pub const CALIBRATION_MAGIC: &[u8; 8] = b"ESACAL1\0";
pub const PROJECTION_MAGIC: &[u8; 8] = b"ESAPROJ1";

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EsaError::config(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential little-endian reader that reports failures against a path.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Cursor {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    pub(crate) fn err(&self, reason: impl Into<String>) -> EsaError {
        EsaError::format(self.path.clone(), reason)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                self.err(format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expected {
            return Err(self.err(format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.err("dimension overflow"))?;
        let b = self.take(len)?;
        let out: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite value"));
        }
        Ok(out)
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err("dimension overflow"))?;
        let data = self.f32s(n)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| EsaError::io(path.display().to_string(), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| EsaError::io(path.display().to_string(), e))
}

pub fn write_calibration(path: &Path, calib: &CalibrationSet) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 8 * calib.queries.data().len());
    buf.extend_from_slice(CALIBRATION_MAGIC);
    put_u32(&mut buf, calib.len())?;
    put_u32(&mut buf, calib.d_model())?;
    put_u32(&mut buf, calib.layer_index)?;
    put_f32s(&mut buf, calib.queries.data());
    put_f32s(&mut buf, calib.keys.data());
    write_file(path, &buf)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationSet> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(CALIBRATION_MAGIC)?;
    let n = cur.u32()?;
    let d = cur.u32()?;
    let layer = cur.u32()?;
    let queries = cur.matrix(n, d)?;
    let keys = cur.matrix(n, d)?;
    cur.finish()?;
    CalibrationSet::new(layer, queries, keys, path.display().to_string())
        .map_err(|e| cur.err(e.to_string()))
}

pub fn write_projection(path: &Path, pair: &ProjectionPair) -> Result<()> {
    pair.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(PROJECTION_MAGIC);
    put_u32(&mut buf, pair.d_reduced())?;
    put_u32(&mut buf, pair.d_model())?;
    put_f32s(&mut buf, pair.query.weight.data());
    put_f32s(&mut buf, &pair.query.bias);
    put_f32s(&mut buf, pair.key.weight.data());
    put_f32s(&mut buf, &pair.key.bias);
    write_file(path, &buf)
}

/// The file does not carry the layer; the caller supplies it.
pub fn read_projection(path: &Path, layer_index: usize) -> Result<ProjectionPair> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(PROJECTION_MAGIC)?;
    let dr = cur.u32()?;
    let dm = cur.u32()?;
    if dr == 0 || dr > dm {
        return Err(cur.err(format!("invalid dims d' = {dr}, d_H = {dm}")));
    }
    let wq = cur.matrix(dr, dm)?;
    let bq = cur.f32s(dr)?;
    let wk = cur.matrix(dr, dm)?;
    let bk = cur.f32s(dr)?;
    cur.finish()?;
    ProjectionPair::new(
        layer_index,
        LinearMap {
            weight: wq,
            bias: bq,
        },
        LinearMap {
            weight: wk,
            bias: bk,
        },
    )
    .map_err(|e| cur.err(e.to_string()))
}
