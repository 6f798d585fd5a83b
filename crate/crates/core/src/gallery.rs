//! The gallery: an immutable id table plus a row-major `f32` matrix.
//!
//! Two on-disk encodings are supported. The text encoding is one JSON object
//! per line, `{"id": "...", "vec": [..]}`. The binary encoding is
//!
//! ```text
//! b"CVRE" | version: u16 | dim: u32 | count: u64 | count*dim f32 | count * (len: u32, utf8 id)
//! ```
//!
//! with every integer and float little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{norm, Embedding, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};

pub const GALLERY_MAGIC: &[u8; 4] = b"CVRE";
pub const GALLERY_VERSION: u16 = 1;

/// One line of the text format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vec: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vec: Vec<f32>) -> Self {
        Self { id: id.into(), vec }
    }
}

#[derive(Debug, Clone)]
pub struct GalleryIndex {
    ids: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
    dim: usize,
    normalized: bool,
    rows_by_id: HashMap<String, usize>,
}

impl PartialEq for GalleryIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.ids == other.ids && self.data == other.data
    }
}

/// Rows whose norm is within f32 rounding of 1 are stored as given, so
/// normalizing a persisted normalized gallery is the identity.
const ALREADY_UNIT: f64 = 4.0 * f32::EPSILON as f64;

/// Builds an index with rows in input order, normalizing each row if asked.
pub fn build_index(records: Vec<EmbeddingRecord>, normalize: bool) -> Result<GalleryIndex> {
    let dim = records.first().ok_or(Error::Empty("gallery source"))?.vec.len();
    if dim == 0 {
        return Err(Error::invalid("gallery dimension must be positive"));
    }
    let mut ids = Vec::with_capacity(records.len());
    let mut data = Vec::with_capacity(records.len() * dim);
    for rec in records {
        if rec.vec.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: rec.vec.len(),
            });
        }
        if rec.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("record `{}`", rec.id)));
        }
        if normalize {
            let n = norm(&rec.vec);
            if n == 0.0 {
                return Err(Error::invalid(format!("record `{}` has zero norm", rec.id)));
            }
            if (n - 1.0).abs() <= ALREADY_UNIT {
                data.extend_from_slice(&rec.vec);
            } else {
                data.extend(rec.vec.iter().map(|&v| (f64::from(v) / n) as f32));
            }
        } else {
            data.extend_from_slice(&rec.vec);
        }
        ids.push(rec.id);
    }
    GalleryIndex::from_parts(ids, data, dim)
}

impl GalleryIndex {
    fn from_parts(ids: Vec<String>, data: Vec<f32>, dim: usize) -> Result<Self> {
        debug_assert_eq!(ids.len() * dim, data.len());
        let mut rows_by_id = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if rows_by_id.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let norms: Vec<f64> = data.chunks_exact(dim).map(norm).collect();
        let normalized = norms.iter().all(|n| (n - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        Ok(Self {
            ids,
            data,
            norms,
            dim,
            normalized,
            rows_by_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when every row is unit-norm within tolerance.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub(crate) fn row_norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows_by_id.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32]> {
        self.row_of(id)
            .map(|r| self.row(r))
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn embedding(&self, id: &str) -> Result<Embedding> {
        Embedding::new(self.lookup(id)?.to_vec())
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        self.ids
            .iter()
            .zip(self.rows())
            .map(|(id, row)| EmbeddingRecord::new(id.clone(), row.to_vec()))
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GALLERY_MAGIC)?;
        w.write_all(&GALLERY_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.ids {
            let len = u32::try_from(id.len()).map_err(|_| Error::invalid("id longer than u32::MAX"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != GALLERY_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(cur.array("version")?);
        if version > GALLERY_VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: GALLERY_VERSION,
            });
        }
        let dim = u32::from_le_bytes(cur.array("dim")?) as usize;
        let count = u64::from_le_bytes(cur.array("count")?);
        if dim == 0 {
            return Err(Error::invalid("stored dimension is zero"));
        }
        if count == 0 {
            return Err(Error::Empty("stored gallery"));
        }
        let n_values = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .ok_or(Error::Truncated("matrix"))?;
        let n_bytes = n_values.checked_mul(4).ok_or(Error::Truncated("matrix"))?;
        let raw = cur.take(n_bytes, "matrix")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("stored matrix"));
        }
        let mut ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u32::from_le_bytes(cur.array("id length")?) as usize;
            let raw = cur.take(len, "id")?;
            let id = std::str::from_utf8(raw).map_err(|_| Error::invalid("id is not valid UTF-8"))?;
            ids.push(id.to_string());
        }
        Self::from_parts(ids, data, dim)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_binary(BufWriter::new(File::create(path)?))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(File::open(path)?)
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, self.records())
    }

    /// Loads an index from either encoding, sniffing the magic bytes.
    pub fn load(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let path = path.as_ref();
        let mut head = [0u8; 4];
        let n = File::open(path)?.read(&mut head)?;
        if n == 4 && &head == GALLERY_MAGIC {
            Self::load_binary(path)
        } else {
            build_index(read_records(path)?, normalize)
        }
    }
}

/// Saves then reloads through the binary encoding.
pub fn persist_roundtrip(index: &GalleryIndex, path: impl AsRef<Path>) -> Result<GalleryIndex> {
    index.save_binary(&path)?;
    GalleryIndex::load_binary(&path)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let s = self.take(N, what)?;
        Ok(s.try_into().expect("slice length checked"))
    }
}

/// Reads JSON-lines records of any deserializable type, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    read_jsonl(path)
}

pub fn write_records(path: impl AsRef<Path>, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<()> {
    write_jsonl(path, records)
}
