//! LightGCN propagation of ID embeddings over the normalized behavior graph.

use ndarray::{Array2, ArrayView2};

use crate::error::{EgraError, Result};
use crate::sparse::SparseAdjacency;

/// Default number of propagation layers on the interaction graph.
pub const DEFAULT_LAYERS: usize = 3;

/// `(1 / (L + 1)) * sum_{l=0..L} G^l E0`.
pub fn propagate_lightgcn(
    e0: ArrayView2<'_, f64>,
    graph: &SparseAdjacency,
    layers: usize,
) -> Result<Array2<f64>> {
    if graph.shape() != (e0.nrows(), e0.nrows()) {
        return Err(EgraError::Shape(format!(
            "graph is {:?} but the embedding table has {} rows",
            graph.shape(),
            e0.nrows()
        )));
    }
    let mut layer = e0.to_owned();
    let mut sum = layer.clone();
    for _ in 0..layers {
        layer = graph.mul_dense(layer.view())?;
        sum += &layer;
    }
    sum /= (layers + 1) as f64;
    Ok(sum)
}

/// Gradient of [`propagate_lightgcn`] with respect to `E0`. `graph_t` is the
/// transpose of the forward graph (the graph itself when symmetric); the map
/// is linear, so this is the same propagation over the transpose.
pub fn propagate_lightgcn_backward(
    grad_out: ArrayView2<'_, f64>,
    graph_t: &SparseAdjacency,
    layers: usize,
) -> Result<Array2<f64>> {
    propagate_lightgcn(grad_out, graph_t, layers)
}
