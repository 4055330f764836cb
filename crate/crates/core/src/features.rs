//! Dense item-feature matrices and the `EGRAF1` binary format.
//!
//! Layout: the 6-byte magic `EGRAF1`, then `rows` and `cols` as little-endian
//! `u64`, then `rows * cols` little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{EgraError, Result};

pub const FEATURE_MAGIC: &[u8; 6] = b"EGRAF1";

pub const VISUAL: &str = "visual";
pub const TEXTUAL: &str = "textual";

pub fn write_matrix<W: Write>(mut w: W, m: &Array2<f32>) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a matrix without validating its values.
pub fn read_matrix<R: Read>(mut r: R) -> Result<Array2<f32>> {
    let bad = |msg: &str| EgraError::Data(format!("feature file: {msg}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u = [0u8; 8];
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    let rows = u64::from_le_bytes(u) as usize;
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    let cols = u64::from_le_bytes(u) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("shape overflows"))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))
}

pub fn save_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| EgraError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m).map_err(|e| EgraError::io(path, e))?;
    w.flush().map_err(|e| EgraError::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Array2<f32>> {
    let file = File::open(path).map_err(|e| EgraError::io(path, e))?;
    read_matrix(BufReader::new(file))
}

/// Per-modality item features, keyed by modality name.
#[derive(Debug, Clone, Default)]
pub struct ModalityFeatureSet {
    features: BTreeMap<String, Array2<f32>>,
}

impl ModalityFeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a modality after checking the row count and that every entry is
    /// finite.
    pub fn insert(&mut self, modality: &str, m: Array2<f32>, num_items: usize) -> Result<()> {
        if m.nrows() != num_items {
            return Err(EgraError::Shape(format!(
                "modality '{modality}' has {} rows but there are {num_items} items",
                m.nrows()
            )));
        }
        for (row, values) in m.outer_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EgraError::Data(format!(
                    "modality '{modality}' has a non-finite value in row {row}"
                )));
            }
        }
        self.features.insert(modality.to_string(), m);
        Ok(())
    }

    pub fn get(&self, modality: &str) -> Option<&Array2<f32>> {
        self.features.get(modality)
    }

    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f32>)> {
        self.features.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn load_modality_features<'a>(
    paths: impl IntoIterator<Item = (&'a str, &'a Path)>,
    num_items: usize,
) -> Result<ModalityFeatureSet> {
    let mut set = ModalityFeatureSet::new();
    for (modality, path) in paths {
        let m = load_matrix(path)?;
        set.insert(modality, m, num_items)?;
    }
    Ok(set)
}
