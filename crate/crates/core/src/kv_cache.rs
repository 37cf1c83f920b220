//! Segmented key/value storage for one layer of one sequence.
//!
//! Tokens arrive in stream order. The first `l_I` fill the initial segment,
//! later ones enter the local window, and whatever overflows the window moves
//! oldest-first into the middle segment. A middle key is compressed exactly
//! once, when it migrates. Nothing is ever evicted.
//!
//! Keys are stored without rotary encoding; positions are assigned when the
//! attention step reads them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::io::{put_f32s, read_file, write_file, Cursor};
use crate::compression::ProjectionPair;
use crate::error::{EsaError, Result};
use crate::selection::SelectionResult;
use crate::tensor::{FlopCounter, Matrix};

const SNAPSHOT_MAGIC: &[u8; 8] = b"ESASNAP1";

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    keys: Matrix,
    values: Matrix,
}

impl Segment {
    fn new(d: usize) -> Self {
        Segment {
            keys: Matrix::empty(d),
            values: Matrix::empty(d),
        }
    }

    fn len(&self) -> usize {
        self.keys.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub moved_count: usize,
    pub new_l_m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSizes {
    pub l_i: usize,
    pub l_m: usize,
    pub l_l: usize,
    /// Bytes held by the compressed middle keys.
    pub compressed_bytes: usize,
    /// Bytes held by full keys and values across all segments.
    pub kv_bytes: usize,
    /// Bytes held by full keys and values of the middle segment only.
    pub middle_kv_bytes: usize,
}

/// Rows handed to one attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredKv {
    /// Initial rows followed by the selected middle rows, ascending.
    pub global_keys: Matrix,
    pub global_values: Matrix,
    /// Local window in arrival order.
    pub local_keys: Matrix,
    pub local_values: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKvCache {
    layer_index: usize,
    d_model: usize,
    d_reduced: usize,
    initial_capacity: usize,
    local_capacity: usize,
    initial: Segment,
    middle: Segment,
    middle_compressed: Matrix,
    local: Segment,
    appended: usize,
}

impl SegmentedKvCache {
    pub fn new(
        layer_index: usize,
        d_model: usize,
        d_reduced: usize,
        initial_capacity: usize,
        local_capacity: usize,
    ) -> Self {
        SegmentedKvCache {
            layer_index,
            d_model,
            d_reduced,
            initial_capacity,
            local_capacity,
            initial: Segment::new(d_model),
            middle: Segment::new(d_model),
            middle_compressed: Matrix::empty(d_reduced),
            local: Segment::new(d_model),
            appended: 0,
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_reduced(&self) -> usize {
        self.d_reduced
    }

    pub fn initial_len(&self) -> usize {
        self.initial.len()
    }

    pub fn middle_len(&self) -> usize {
        self.middle.len()
    }

    pub fn local_len(&self) -> usize {
        self.local.len()
    }

    /// Total rows ever appended; also the stream position of the next token.
    pub fn total_appended(&self) -> usize {
        self.appended
    }

    pub fn initial_keys(&self) -> &Matrix {
        &self.initial.keys
    }

    pub fn initial_values(&self) -> &Matrix {
        &self.initial.values
    }

    pub fn middle_keys(&self) -> &Matrix {
        &self.middle.keys
    }

    pub fn middle_values(&self) -> &Matrix {
        &self.middle.values
    }

    pub fn middle_compressed(&self) -> &Matrix {
        &self.middle_compressed
    }

    pub fn local_keys(&self) -> &Matrix {
        &self.local.keys
    }

    pub fn local_values(&self) -> &Matrix {
        &self.local.values
    }

    /// Stream position of middle row `j`.
    pub fn middle_position(&self, j: usize) -> usize {
        self.initial.len() + j
    }

    /// Stream position of local row `j`.
    pub fn local_position(&self, j: usize) -> usize {
        self.initial.len() + self.middle.len() + j
    }

    /// Appends a chunk, migrating local overflow into the middle segment and
    /// compressing each migrated key with `pair.key`.
    pub fn append_chunk(
        &mut self,
        keys: &Matrix,
        values: &Matrix,
        pair: &ProjectionPair,
        flops: &mut FlopCounter,
    ) -> Result<MigrationEvent> {
        if keys.rows() != values.rows() {
            return Err(EsaError::dim(format!(
                "{} key rows but {} value rows",
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != self.d_model || values.cols() != self.d_model {
            return Err(EsaError::dim(format!(
                "chunk width {}/{} does not match cache width {}",
                keys.cols(),
                values.cols(),
                self.d_model
            )));
        }
        if pair.d_model() != self.d_model || pair.d_reduced() != self.d_reduced {
            return Err(EsaError::dim(format!(
                "projection {}→{} does not fit cache {}→{}",
                pair.d_model(),
                pair.d_reduced(),
                self.d_model,
                self.d_reduced
            )));
        }
        if pair.layer_index != self.layer_index {
            return Err(EsaError::config(format!(
                "projection for layer {} used on cache for layer {}",
                pair.layer_index, self.layer_index
            )));
        }

        for r in 0..keys.rows() {
            let seg = if self.initial.len() < self.initial_capacity {
                &mut self.initial
            } else {
                &mut self.local
            };
            seg.keys.push_row(keys.row(r))?;
            seg.values.push_row(values.row(r))?;
        }
        self.appended += keys.rows();

        let overflow = self.local.len().saturating_sub(self.local_capacity);
        if overflow > 0 {
            let moved_keys = self.local.keys.drain_front(overflow);
            let moved_values = self.local.values.drain_front(overflow);
            let compressed = pair.key.apply_rows(&moved_keys, flops)?;
            self.middle.keys.append(&moved_keys)?;
            self.middle.values.append(&moved_values)?;
            self.middle_compressed.append(&compressed)?;
        }
        Ok(MigrationEvent {
            moved_count: overflow,
            new_l_m: self.middle.len(),
        })
    }

    /// Initial rows plus the selected middle rows, and the local window.
    pub fn gather_selected(&self, selection: &SelectionResult) -> Result<GatheredKv> {
        let mut global_keys = self.initial.keys.clone();
        let mut global_values = self.initial.values.clone();
        global_keys.append(&self.middle.keys.select_rows(&selection.indices)?)?;
        global_values.append(&self.middle.values.select_rows(&selection.indices)?)?;
        Ok(GatheredKv {
            global_keys,
            global_values,
            local_keys: self.local.keys.clone(),
            local_values: self.local.values.clone(),
        })
    }

    pub fn cache_sizes(&self) -> CacheSizes {
        const F32: usize = std::mem::size_of::<f32>();
        let rows = self.initial.len() + self.middle.len() + self.local.len();
        CacheSizes {
            l_i: self.initial.len(),
            l_m: self.middle.len(),
            l_l: self.local.len(),
            compressed_bytes: self.middle_compressed.rows() * self.d_reduced * F32,
            kv_bytes: rows * 2 * self.d_model * F32,
            middle_kv_bytes: self.middle.len() * 2 * self.d_model * F32,
        }
    }

    /// Writes the cache as `b"ESASNAP1"`, a `u32` LE header length, a JSON
    /// header of counts, then the segments' keys and values in I/M/L order
    /// followed by the compressed middle keys, all as LE `f32`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            layer_index: self.layer_index,
            d_model: self.d_model,
            d_reduced: self.d_reduced,
            initial_capacity: self.initial_capacity,
            local_capacity: self.local_capacity,
            l_i: self.initial.len(),
            l_m: self.middle.len(),
            l_l: self.local.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        crate::compression::io::put_u32(&mut buf, json.len())?;
        buf.extend_from_slice(&json);
        for seg in [&self.initial, &self.middle, &self.local] {
            put_f32s(&mut buf, seg.keys.data());
            put_f32s(&mut buf, seg.values.data());
        }
        put_f32s(&mut buf, self.middle_compressed.data());
        write_file(path, &buf)
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut cur = Cursor::new(&bytes, path);
        cur.magic(SNAPSHOT_MAGIC)?;
        let hlen = cur.u32()?;
        let raw = cur.take(hlen)?;
        let h: SnapshotHeader =
            serde_json::from_slice(raw).map_err(|e| cur.err(format!("bad header: {e}")))?;
        if h.l_i > h.initial_capacity || h.l_l > h.local_capacity {
            return Err(cur.err("segment counts exceed capacities"));
        }
        if h.l_m + h.l_l > 0 && h.l_i < h.initial_capacity {
            return Err(cur.err("initial segment must be full before later segments"));
        }
        let mut cache = SegmentedKvCache::new(
            h.layer_index,
            h.d_model,
            h.d_reduced,
            h.initial_capacity,
            h.local_capacity,
        );
        for (seg, n) in [
            (&mut cache.initial, h.l_i),
            (&mut cache.middle, h.l_m),
            (&mut cache.local, h.l_l),
        ] {
            seg.keys = cur.matrix(n, h.d_model)?;
            seg.values = cur.matrix(n, h.d_model)?;
        }
        cache.middle_compressed = cur.matrix(h.l_m, h.d_reduced)?;
        cur.finish()?;
        cache.appended = h.l_i + h.l_m + h.l_l;
        Ok(cache)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    layer_index: usize,
    d_model: usize,
    d_reduced: usize,
    initial_capacity: usize,
    local_capacity: usize,
    l_i: usize,
    l_m: usize,
    l_l: usize,
}
