//! FGT1 binary tensor container, activation batches, streaming readers and
//! per-channel normalization statistics.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "FGT1"
//! version  u32      1
//! dtype    u8       0 = float32
//! rank     u32
//! dims     rank * u64
//! n_meta   u32
//! meta     n_meta * (u32 key_len, key utf-8, u32 value_len, value utf-8)
//! payload  product(dims) * f32, row-major
//! ```
//!
//! Metadata entries are written in key order so identical tensors always
//! produce identical bytes.

mod manifest;
mod stats;
mod stream;

pub use manifest::{ExportFile, ExportManifest, FileKind};
pub use stats::{compute_norm_stats, denormalize, normalize, NormStats, STD_FLOOR};
pub use stream::{chunk_batches, BatchReader};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FGT1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub type Meta = BTreeMap<String, String>;

/// Any-rank float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: Meta,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, meta: Meta) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, meta })
    }

    pub fn from_matrix(m: &Array2<f32>, meta: Meta) -> Self {
        let (r, c) = m.dim();
        Self {
            shape: vec![r, c],
            data: m.iter().copied().collect(),
            meta,
        }
    }

    pub fn from_vector(v: &[f32], meta: Meta) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
            meta,
        }
    }

    pub fn into_matrix(self) -> Result<Array2<f32>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a rank-2 tensor, got rank {}",
                self.shape.len()
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {expected} values, got {}",
                self.shape,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor payload at flat index {i}")));
        }
        let mut out = Vec::with_capacity(64 + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = cur.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let n_meta = cur.u32()? as usize;
        let mut meta = Meta::new();
        for _ in 0..n_meta {
            let k = cur.string()?;
            let v = cur.string()?;
            meta.insert(k, v);
        }
        let payload_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        let remaining = bytes.len() - cur.pos;
        if remaining < payload_len {
            return Err(Error::Format(format!(
                "truncated payload: expected {payload_len} bytes, found {remaining}"
            )));
        }
        if remaining > payload_len {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                remaining - payload_len
            )));
        }
        let data = bytes[cur.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data, meta })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format("metadata is not utf-8".into()))
    }
}

/// Matrix of activation rows (n_tokens x d_model) with provenance metadata.
///
/// All values are finite; construction rejects NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    rows: Array2<f32>,
    pub meta: Meta,
}

impl ActivationBatch {
    pub fn new(rows: Array2<f32>, meta: Meta) -> Result<Self> {
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let d = rows.ncols().max(1);
            return Err(Error::NonFinite(format!(
                "activation row {} column {}",
                i / d,
                i % d
            )));
        }
        Ok(Self { rows, meta })
    }

    pub fn from_rows(rows: Array2<f32>) -> Result<Self> {
        Self::new(rows, Meta::new())
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f32> {
        self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        TensorFile::from_matrix(&self.rows, self.meta.clone())
    }

    pub fn from_tensor_file(t: TensorFile) -> Result<Self> {
        let meta = t.meta.clone();
        Self::new(t.into_matrix()?, meta)
    }

    /// Stacks batches of equal width into one.
    pub fn concat(batches: &[ActivationBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Empty("no batches to concatenate".into()))?;
        let d = first.dim();
        let n: usize = batches.iter().map(|b| b.n_rows()).sum();
        let mut data = Vec::with_capacity(n * d);
        for b in batches {
            if b.dim() != d {
                return Err(Error::Shape(format!("batch width {} != {d}", b.dim())));
            }
            data.extend(b.rows.iter().copied());
        }
        let rows = Array2::from_shape_vec((n, d), data).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            rows,
            meta: first.meta.clone(),
        })
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    atomic_write(path.as_ref(), &t.encode()?)
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, batch: &ActivationBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("activation batch has no rows".into()));
    }
    write_tensor_file(path, &batch.to_tensor_file())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    ActivationBatch::from_tensor_file(read_tensor_file(path)?)
}
