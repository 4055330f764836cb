//! Top-K cosine similarity graphs over item embeddings and assembly of the
//! enhanced behavior graph.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{EgraError, Result};
use crate::sparse::SparseAdjacency;

/// Rows per similarity block. The full `n x n` similarity matrix is never
/// materialized.
const ROW_CHUNK: usize = 512;

/// Default neighbor count for the pretrained-embedding graph.
pub const DEFAULT_H: usize = 5;
/// Default neighbor count for the modality graphs.
pub const DEFAULT_K: usize = 10;

/// Row-normalized copy in `f64`. Zero rows stay zero, so their cosine with
/// anything is 0.
fn unit_rows(e: ArrayView2<'_, f32>) -> Array2<f64> {
    let mut out = e.mapv(|v| v as f64);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

fn by_similarity(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// For every row, the `k` most cosine-similar other rows as `(col, cosine)`
/// pairs, best first. Ties go to the lower id.
pub fn topk_neighbors(e: ArrayView2<'_, f32>, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = e.nrows();
    if k == 0 {
        return Err(EgraError::Argument("neighbor count must be at least 1".into()));
    }
    if k >= n {
        return Err(EgraError::Argument(format!(
            "neighbor count {k} must be below the item count {n}"
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(EgraError::Data("embedding matrix has non-finite entries".into()));
    }
    let unit = unit_rows(e);
    let starts: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
    let chunks: Vec<Vec<Vec<(usize, f64)>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + ROW_CHUNK).min(n);
            let sims = unit.slice(s![start..end, ..]).dot(&unit.t());
            sims.outer_iter()
                .enumerate()
                .map(|(offset, row)| {
                    let i = start + offset;
                    let mut cand: Vec<(usize, f64)> = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(j, &v)| (j, v))
                        .collect();
                    cand.select_nth_unstable_by(k - 1, by_similarity);
                    cand.truncate(k);
                    cand.sort_by(by_similarity);
                    cand
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Directed Top-K graph: exactly `k` entries per row. With `weighted` the
/// entries carry the cosine, otherwise 1.
pub fn topk_directed(e: ArrayView2<'_, f32>, k: usize, weighted: bool) -> Result<SparseAdjacency> {
    let n = e.nrows();
    let neighbors = topk_neighbors(e, k)?;
    let triplets = neighbors
        .into_iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.into_iter()
                .map(move |(j, sim)| (i, j, if weighted { sim as f32 } else { 1.0 }))
        })
        .collect();
    SparseAdjacency::from_triplets(n, n, triplets)
}

/// Binary Top-H graph over pretrained item embeddings, symmetrized by union.
pub fn topk_binary_graph(e_pt: ArrayView2<'_, f32>, h: usize) -> Result<SparseAdjacency> {
    topk_directed(e_pt, h, false)?.symmetrize_union()
}

/// Top-K graph over raw modality features keeping cosine weights,
/// symmetrized by union.
pub fn topk_weighted_graph(e_m: ArrayView2<'_, f32>, k: usize) -> Result<SparseAdjacency> {
    topk_directed(e_m, k, true)?.symmetrize_union()
}

/// Block matrix `[[0, R], [R^T, S]]` over `|U| + |I|` nodes with item
/// indices offset by `|U|`.
pub fn build_enhanced_adjacency(
    r: &SparseAdjacency,
    s_pt: &SparseAdjacency,
) -> Result<SparseAdjacency> {
    let (users, items) = r.shape();
    if s_pt.shape() != (items, items) {
        return Err(EgraError::Shape(format!(
            "item graph is {:?} but R has {items} items",
            s_pt.shape()
        )));
    }
    let n = users + items;
    let mut triplets = Vec::with_capacity(2 * r.nnz() + s_pt.nnz());
    for (u, i, w) in r.entries() {
        triplets.push((u, users + i, w));
        triplets.push((users + i, u, w));
    }
    for (i, j, w) in s_pt.entries() {
        triplets.push((users + i, users + j, w));
    }
    SparseAdjacency::from_triplets(n, n, triplets)
}

/// Plain symmetrized bipartite graph (the item-item block is empty).
pub fn build_bipartite_adjacency(r: &SparseAdjacency) -> Result<SparseAdjacency> {
    let items = r.shape().1;
    build_enhanced_adjacency(r, &SparseAdjacency::empty(items, items))
}

/// Binary graph holding the edges present in both modality graphs.
pub fn build_gume_comparator_graph(
    s_v: &SparseAdjacency,
    s_t: &SparseAdjacency,
) -> Result<SparseAdjacency> {
    if s_v.shape() != s_t.shape() {
        return Err(EgraError::Shape(format!(
            "modality graphs differ in shape: {:?} vs {:?}",
            s_v.shape(),
            s_t.shape()
        )));
    }
    let other: HashSet<(usize, usize)> = s_t.entries().map(|(r, c, _)| (r, c)).collect();
    let triplets = s_v
        .entries()
        .filter(|(r, c, _)| other.contains(&(*r, *c)))
        .map(|(r, c, _)| (r, c, 1.0))
        .collect();
    let (n, m) = s_v.shape();
    SparseAdjacency::from_triplets(n, m, triplets)
}
