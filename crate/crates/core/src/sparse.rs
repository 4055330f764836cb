//! Compressed sparse row matrices with `f32` weights.
//!
//! Every graph in the pipeline (interaction matrix, item-item kNN graphs, the
//! enhanced behavior graph) is stored here. Entries are kept sorted by row and
//! then by column, so two matrices with the same entries are byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{EgraError, Result};

pub const GRAPH_MAGIC: &[u8; 6] = b"EGRAG1";

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f32>,
    normalized: bool,
}

impl SparseAdjacency {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseAdjacency {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
            normalized: false,
        }
    }

    /// Builds a matrix from `(row, col, weight)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f32)>,
    ) -> Result<Self> {
        for &(r, c, w) in &triplets {
            if r >= rows || c >= cols {
                return Err(EgraError::Shape(format!(
                    "entry ({r}, {c}) out of bounds for {rows}x{cols} matrix"
                )));
            }
            if !w.is_finite() {
                return Err(EgraError::Data(format!("non-finite weight at ({r}, {c})")));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f32> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, w) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += w;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(w);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseAdjacency {
            rows,
            cols,
            indptr,
            indices,
            values,
            normalized: false,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column indices and weights of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f32]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &w)| (r, c, w))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f32> {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).ok().map(|k| vals[k])
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.entries().map(|(r, c, w)| (c, r, w)).collect();
        let mut t = Self::from_triplets(self.cols, self.rows, triplets)
            .expect("transpose of a valid matrix is valid");
        t.normalized = self.normalized;
        t
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.entries().all(|(r, c, w)| self.get(c, r) == Some(w))
    }

    /// Union of the edge sets of `self` and its transpose. When both
    /// directions exist with different weights the larger one is kept.
    pub fn symmetrize_union(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(EgraError::Shape("cannot symmetrize a rectangular matrix".into()));
        }
        let mut triplets: Vec<(usize, usize, f32)> = Vec::with_capacity(2 * self.nnz());
        for (r, c, w) in self.entries() {
            triplets.push((r, c, w));
            triplets.push((c, r, w));
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(b.2.total_cmp(&a.2)));
        triplets.dedup_by(|next, kept| next.0 == kept.0 && next.1 == kept.1);
        Self::from_triplets(self.rows, self.cols, triplets)
    }

    /// Replaces negative weights by zero, keeping the entries.
    pub fn clip_negative(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    /// Weighted row sums, accumulated in `f64`.
    pub fn row_degrees(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).1.iter().map(|&w| w as f64).sum())
            .collect()
    }

    pub fn col_degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0f64; self.cols];
        for (_, c, w) in self.entries() {
            deg[c] += w as f64;
        }
        deg
    }

    /// `D^{-1/2} A D^{-1/2}` with `D` the weighted row degree. Rows with zero
    /// degree become all-zero rows.
    pub fn sym_normalize(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(EgraError::Shape(format!(
                "sym_normalize needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        if let Some((r, c, w)) = self.entries().find(|e| e.2 < 0.0) {
            return Err(EgraError::Argument(format!(
                "negative weight {w} at ({r}, {c})"
            )));
        }
        let deg = self.row_degrees();
        Ok(self.scale_by_degrees(&deg, &deg))
    }

    /// Bipartite symmetric normalization of a rectangular matrix: entry
    /// `(r, c)` is divided by `sqrt(rowdeg(r) * coldeg(c))`.
    pub fn bipartite_normalize(&self) -> Result<Self> {
        if let Some((r, c, w)) = self.entries().find(|e| e.2 < 0.0) {
            return Err(EgraError::Argument(format!(
                "negative weight {w} at ({r}, {c})"
            )));
        }
        Ok(self.scale_by_degrees(&self.row_degrees(), &self.col_degrees()))
    }

    fn scale_by_degrees(&self, row_deg: &[f64], col_deg: &[f64]) -> Self {
        let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
        let mut out = self.clone();
        for r in 0..self.rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            for k in span {
                let c = self.indices[k];
                // the factor product commutes exactly, so symmetric inputs stay symmetric
                let scaled = self.values[k] as f64 * (inv_sqrt(row_deg[r]) * inv_sqrt(col_deg[c]));
                out.values[k] = scaled as f32;
            }
        }
        out.normalized = true;
        out
    }

    /// `self · x` for a dense right-hand side, accumulating in `f64` in
    /// stored entry order.
    pub fn mul_dense(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols {
            return Err(EgraError::Shape(format!(
                "cannot multiply {}x{} sparse by {}x{} dense",
                self.rows,
                self.cols,
                x.nrows(),
                x.ncols()
            )));
        }
        let mut out = Array2::<f64>::zeros((self.rows, x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                let (cols, vals) = self.row(r);
                for (&c, &w) in cols.iter().zip(vals) {
                    out_row.scaled_add(w as f64, &x.row(c));
                }
            });
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for (r, c, w) in self.entries() {
            d[[r, c]] += w as f64;
        }
        d
    }

    /// Serializes to the `EGRAG1` layout: magic, `n` and `nnz` as `u64`, then
    /// `(row u64, col u64, weight f32)` triplets, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if !self.is_square() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "only square graphs can be serialized",
            ));
        }
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for (r, c, v) in self.entries() {
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| EgraError::Data(format!("graph file: {msg}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != GRAPH_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u = [0u8; 8];
        let mut f = [0u8; 4];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(u))
        };
        let n = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let mut triplets = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let row = read_u64(&mut r)? as usize;
            let col = read_u64(&mut r)? as usize;
            r.read_exact(&mut f).map_err(|_| bad("truncated"))?;
            triplets.push((row, col, f32::from_le_bytes(f)));
        }
        Self::from_triplets(n, n, triplets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| EgraError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| EgraError::io(path, e))?;
        w.flush().map_err(|e| EgraError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EgraError::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_edge_normalizes_to_one() {
        let a = SparseAdjacency::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let n = a.sym_normalize().unwrap();
        assert_eq!(n.get(0, 1), Some(1.0));
        assert!(n.is_normalized());
    }

    #[test]
    fn regular_graph_normalizes_to_inverse_degree() {
        // 4-cycle: every node has degree 2
        let mut t = Vec::new();
        for i in 0..4 {
            t.push((i, (i + 1) % 4, 1.0));
            t.push(((i + 1) % 4, i, 1.0));
        }
        let n = SparseAdjacency::from_triplets(4, 4, t).unwrap().sym_normalize().unwrap();
        assert!(n.entries().all(|(_, _, w)| (w - 0.5).abs() < 1e-7));
    }

    #[test]
    fn star_graph_edges_are_one_half() {
        let mut t = Vec::new();
        for leaf in 1..5 {
            t.push((0, leaf, 1.0));
            t.push((leaf, 0, 1.0));
        }
        let n = SparseAdjacency::from_triplets(5, 5, t).unwrap().sym_normalize().unwrap();
        // oracle: 1 / sqrt(4 * 1)
        let expected = 1.0 / (4.0f64 * 1.0).sqrt();
        assert!(n.entries().all(|(_, _, w)| (w as f64 - expected).abs() < 1e-7));
    }

    #[test]
    fn zero_degree_rows_stay_zero() {
        let a = SparseAdjacency::from_triplets(3, 3, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let n = a.sym_normalize().unwrap();
        assert_eq!(n.row_nnz(2), 0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let a = SparseAdjacency::from_triplets(2, 2, vec![(0, 1, -0.5), (1, 0, -0.5)]).unwrap();
        assert!(matches!(a.sym_normalize(), Err(EgraError::Argument(_))));
        assert!(a.clip_negative().sym_normalize().is_ok());
    }

    #[test]
    fn out_of_bounds_entry_is_rejected() {
        assert!(SparseAdjacency::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn mul_dense_matches_dense_product() {
        let a = SparseAdjacency::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)])
            .unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let got = a.mul_dense(x.view()).unwrap();
        assert_eq!(got, a.to_dense().dot(&x));
        assert!(a.mul_dense(got.view()).is_err());
    }

    #[test]
    fn union_keeps_both_directions() {
        let a = SparseAdjacency::from_triplets(3, 3, vec![(0, 1, 1.0), (2, 1, 0.5)]).unwrap();
        let s = a.symmetrize_union().unwrap();
        assert!(s.is_symmetric());
        assert_eq!(s.nnz(), 4);
        assert_eq!(s.get(1, 2), Some(0.5));
    }

    #[test]
    fn graph_file_round_trip() {
        let a = SparseAdjacency::from_triplets(3, 3, vec![(0, 2, 0.25), (2, 0, 0.25), (1, 1, 3.0)])
            .unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], GRAPH_MAGIC);
        assert_eq!(buf.len(), 6 + 16 + 3 * 20);
        let b = SparseAdjacency::read_from(buf.as_slice()).unwrap();
        assert_eq!(a.entries().collect::<Vec<_>>(), b.entries().collect::<Vec<_>>());
    }
}
