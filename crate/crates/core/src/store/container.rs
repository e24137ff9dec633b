use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{check_id, Result, StoreError};

pub const MAGIC: &[u8; 4] = b"CFRE";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Element type code stored at byte 20 of the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0x01,
    /// Used for fitted model parameters, which must survive a round trip
    /// without losing precision.
    F64 = 0x02,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0x01 => Ok(Dtype::F32),
            0x02 => Ok(Dtype::F64),
            other => Err(StoreError::BadDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// N×d matrix of f32 observation representations with unique row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::Shape("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::Shape(format!(
                "{} values for {} rows of dimension {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        check_ids(&ids)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { ids, dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    /// Builds a set from an f64 matrix, rounding every entry to f32.
    pub fn from_matrix(ids: Vec<String>, matrix: &DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != ids.len() {
            return Err(StoreError::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        let (n, d) = matrix.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(matrix.row(i).iter().map(|&v| v as f32));
        }
        Self::new(ids, d, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.row(i).iter().map(|&v| f64::from(v)))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn id_index(&self) -> std::collections::HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows as an N×d f64 matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.len(),
            self.dim,
            self.data.iter().map(|&v| f64::from(v)),
        )
    }

    /// Subset of rows in the given id order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let index = self.id_index();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let &i = index
                .get(id)
                .ok_or_else(|| StoreError::UnknownId(id.to_string()))?;
            data.extend_from_slice(self.row(i));
            out_ids.push(id.to_string());
        }
        Self::new(out_ids, self.dim, data)
    }

    /// Row-wise concatenation; ids must stay unique.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<Self> {
        if self.dim != other.dim {
            return Err(StoreError::Shape(format!(
                "cannot concatenate dimension {} with {}",
                self.dim, other.dim
            )));
        }
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(ids, self.dim, data)
    }
}

fn check_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        check_id(id)?;
        if id.len() > u16::MAX as usize {
            return Err(StoreError::InvalidId(id.clone()));
        }
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// A container holding f64 values: fitted parameters, bases, weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub ids: Vec<String>,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl MatrixFile {
    pub fn from_matrix(ids: Vec<String>, matrix: &DMatrix<f64>) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(StoreError::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        let (n, d) = matrix.shape();
        let mut values = Vec::with_capacity(n * d);
        for i in 0..n {
            values.extend(matrix.row(i).iter().copied());
        }
        Ok(Self {
            ids,
            cols: d,
            values,
        })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.ids.len(), self.cols, &self.values)
    }

    /// Rows whose ids start with `prefix`, in file order.
    pub fn rows_with_prefix(&self, prefix: &str) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.ids.len())
            .filter(|&i| self.ids[i].starts_with(prefix))
            .collect();
        DMatrix::from_fn(rows.len(), self.cols, |i, j| {
            self.values[rows[i] * self.cols + j]
        })
    }
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

fn encode(ids: &[String], cols: usize, payload: Payload<'_>) -> Vec<u8> {
    let (dtype, count) = match payload {
        Payload::F32(v) => (Dtype::F32, v.len()),
        Payload::F64(v) => (Dtype::F64, v.len()),
    };
    let id_bytes: usize = ids.iter().map(|s| 2 + s.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + count * dtype.width() + id_bytes);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.push(dtype as u8);
    buf.extend_from_slice(&[0u8; 11]);
    match payload {
        Payload::F32(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    for id in ids {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    buf
}

struct Decoded {
    ids: Vec<String>,
    cols: usize,
    dtype: Dtype,
    f32s: Vec<f32>,
    f64s: Vec<f64>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(len).ok_or(StoreError::TruncatedPayload)?;
    if end > bytes.len() {
        return Err(StoreError::TruncatedPayload);
    }
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedPayload);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch(version));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let dtype = Dtype::from_code(bytes[20])?;
    if bytes[21..32].iter().any(|&b| b != 0) {
        return Err(StoreError::BadReserved);
    }
    let n = usize::try_from(n).map_err(|_| StoreError::TruncatedPayload)?;
    let count = n.checked_mul(cols).ok_or(StoreError::TruncatedPayload)?;
    let mut pos = HEADER_LEN;
    let raw = take(
        bytes,
        &mut pos,
        count
            .checked_mul(dtype.width())
            .ok_or(StoreError::TruncatedPayload)?,
    )?;
    let (mut f32s, mut f64s) = (Vec::new(), Vec::new());
    match dtype {
        Dtype::F32 => {
            f32s = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(p) = f32s.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    row: p / cols,
                    col: p % cols,
                });
            }
        }
        Dtype::F64 => {
            f64s = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(p) = f64s.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    row: p / cols,
                    col: p % cols,
                });
            }
        }
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_le_bytes(take(bytes, &mut pos, 2)?.try_into().unwrap()) as usize;
        let raw = take(bytes, &mut pos, len)?;
        let id = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidUtf8)?;
        ids.push(id.to_string());
    }
    if pos != bytes.len() {
        return Err(StoreError::TrailingBytes(bytes.len() - pos));
    }
    Ok(Decoded {
        ids,
        cols,
        dtype,
        f32s,
        f64s,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| StoreError::io(path, e))?;
    w.flush().map_err(|e| StoreError::io(path, e))
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // The constructor guarantees finiteness, but a set can only be built
    // through it; re-check anyway since the file is the contract.
    if let Some(p) = set.data.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite {
            row: p / set.dim,
            col: p % set.dim,
        });
    }
    let bytes = encode(&set.ids, set.dim, Payload::F32(&set.data));
    write_bytes(path, &bytes)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let decoded = decode(&bytes)?;
    if decoded.dtype != Dtype::F32 {
        return Err(StoreError::BadDtype(decoded.dtype as u8));
    }
    EmbeddingSet::new(decoded.ids, decoded.cols, decoded.f32s)
}

pub fn write_matrix(file: &MatrixFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if file.values.len() != file.ids.len() * file.cols {
        return Err(StoreError::Shape(format!(
            "{} values for {} rows of {} columns",
            file.values.len(),
            file.ids.len(),
            file.cols
        )));
    }
    check_ids(&file.ids)?;
    if let Some(p) = file.values.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite {
            row: p / file.cols.max(1),
            col: p % file.cols.max(1),
        });
    }
    let bytes = encode(&file.ids, file.cols, Payload::F64(&file.values));
    write_bytes(path, &bytes)
}

/// Reads a container of either dtype; f32 payloads are widened.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<MatrixFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let decoded = decode(&bytes)?;
    let values = match decoded.dtype {
        Dtype::F64 => decoded.f64s,
        Dtype::F32 => decoded.f32s.iter().map(|&v| f64::from(v)).collect(),
    };
    Ok(MatrixFile {
        ids: decoded.ids,
        cols: decoded.cols,
        values,
    })
}
