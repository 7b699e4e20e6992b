//! Immutable id → feature-vector table and the `CFV1` binary format.
//!
//! Layout: magic `CFV1`, `u32` LE count, `u32` LE dimension, then
//! `count × dimension` little-endian `f32`, row-major. A sidecar UTF-8 file
//! names row `i` on line `i`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ImageId;

pub const MAGIC: &[u8; 4] = b"CFV1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dimension: usize,
    ids: Vec<ImageId>,
    data: Vec<f32>,
    index: HashMap<ImageId, usize>,
}

impl FeatureStore {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        Ok(FeatureStore {
            dimension,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_rows(dimension: usize, rows: impl IntoIterator<Item = (ImageId, Vec<f32>)>) -> Result<Self> {
        let mut store = FeatureStore::new(dimension)?;
        for (id, v) in rows {
            store.push(id, &v)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, id: ImageId, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: vector.len(),
            });
        }
        if let Some(bad) = vector.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite component {bad} in vector for {id}")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Consistency(format!("duplicate image id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn index_of(&self, id: &ImageId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn get(&self, id: &ImageId) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn require(&self, id: &ImageId) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    /// Feature for `id` widened to 64-bit.
    pub fn get_f64(&self, id: &ImageId) -> Result<Vec<f64>> {
        Ok(self.require(id)?.iter().map(|&x| x as f64).collect())
    }

    /// Entries in stable insertion (sidecar) order.
    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[f32])> {
        self.ids.iter().enumerate().map(move |(i, id)| (id, self.row(i)))
    }
}

/// Default sidecar path: the feature path with `.ids` appended.
pub fn default_ids_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn encode_cfv(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.dimension as u32).to_le_bytes());
    for x in &store.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes a `CFV1` payload, returning `(dimension, rows)`.
pub fn decode_cfv(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing CFV1 magic or truncated header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("header dimension is zero".into()));
    }
    let payload = &bytes[12..];
    let row_bytes = dim * 4;
    if payload.len() % row_bytes != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of {dim}-dimensional rows",
            payload.len()
        )));
    }
    let rows_present = payload.len() / row_bytes;
    if rows_present != count {
        return Err(Error::Consistency(format!(
            "header declares {count} vectors but payload holds {rows_present}"
        )));
    }
    let rows = payload
        .chunks_exact(row_bytes)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((dim, rows))
}

pub fn load_feature_store(features: &Path, ids: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(features).map_err(|e| Error::io(features, e))?;
    let (dim, rows) = decode_cfv(&bytes)?;
    let file = fs::File::open(ids).map_err(|e| Error::io(ids, e))?;
    let mut names = Vec::with_capacity(rows.len());
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(ids, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        names.push(ImageId::new(line)?);
    }
    if names.len() != rows.len() {
        return Err(Error::Consistency(format!(
            "{} ids in sidecar but {} vectors in feature file",
            names.len(),
            rows.len()
        )));
    }
    let mut store = FeatureStore::new(dim)?;
    for (id, row) in names.into_iter().zip(rows) {
        store.push(id, &row)?;
    }
    Ok(store)
}

pub fn write_feature_store(store: &FeatureStore, features: &Path, ids: &Path) -> Result<()> {
    fs::write(features, encode_cfv(store)).map_err(|e| Error::io(features, e))?;
    let file = fs::File::create(ids).map_err(|e| Error::io(ids, e))?;
    let mut w = BufWriter::new(file);
    for id in store.ids() {
        writeln!(w, "{id}").map_err(|e| Error::io(ids, e))?;
    }
    w.flush().map_err(|e| Error::io(ids, e))
}

/// Result of [`l2_normalize`]; `degenerate` is set when the input norm is below 1e-12
/// and the vector was returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = norm(v);
    if n < DEGENERATE_NORM {
        return Normalized {
            vector: v.to_vec(),
            degenerate: true,
        };
    }
    Normalized {
        vector: v.iter().map(|x| x / n).collect(),
        degenerate: false,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
