//! Modality branch: feature projection, behavior purification, propagation
//! over the item semantic graph and user aggregation.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{EgraError, Result};
use crate::ops::{col_sum, sigmoid, xavier_uniform};
use crate::sparse::SparseAdjacency;

/// Two-layer projection from a `d_m`-wide modality feature to the `d`-wide
/// embedding space: `sigmoid(W2 (W1 x + b1) + b2)`, no activation between
/// the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProjector {
    /// `d x d_m`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d x d`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ModalityProjector {
    pub fn zeros(dim: usize, input_dim: usize) -> Self {
        ModalityProjector {
            w1: Array2::zeros((dim, input_dim)),
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(dim: usize, input_dim: usize, rng: &mut R) -> Self {
        ModalityProjector {
            w1: xavier_uniform(dim, input_dim, input_dim, dim, rng),
            b1: Array1::zeros(dim),
            w2: xavier_uniform(dim, dim, dim, dim, rng),
            b2: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }
}

/// Intermediates of [`project_modality_cached`].
#[derive(Debug, Clone)]
pub struct Projection {
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

pub fn project_modality_cached(
    features: ArrayView2<'_, f64>,
    proj: &ModalityProjector,
) -> Result<Projection> {
    if features.ncols() != proj.input_dim() {
        return Err(EgraError::Shape(format!(
            "features have width {} but the projector expects {}",
            features.ncols(),
            proj.input_dim()
        )));
    }
    let hidden = features.dot(&proj.w1.t()) + &proj.b1;
    let output = (hidden.dot(&proj.w2.t()) + &proj.b2).mapv_into(sigmoid);
    Ok(Projection { hidden, output })
}

/// Projected features, one row per item, entries in `(0, 1)`.
pub fn project_modality(
    features: ArrayView2<'_, f64>,
    proj: &ModalityProjector,
) -> Result<Array2<f64>> {
    Ok(project_modality_cached(features, proj)?.output)
}

pub fn project_modality_backward(
    features: ArrayView2<'_, f64>,
    proj: &ModalityProjector,
    cache: &Projection,
    grad_out: ArrayView2<'_, f64>,
) -> ModalityProjector {
    let dz = &grad_out * &cache.output.mapv(|p| p * (1.0 - p));
    let dh = dz.dot(&proj.w2);
    ModalityProjector {
        w1: dh.t().dot(&features),
        b1: col_sum(dh.view()),
        w2: dz.t().dot(&cache.hidden),
        b2: col_sum(dz.view()),
    }
}

/// Hadamard product of projected features and item behavior embeddings.
pub fn purify(projected: ArrayView2<'_, f64>, behavior_items: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if projected.dim() != behavior_items.dim() {
        return Err(EgraError::Shape(format!(
            "purify: {:?} vs {:?}",
            projected.dim(),
            behavior_items.dim()
        )));
    }
    Ok(&projected * &behavior_items)
}

/// `S^L X0`: the output of the last layer only.
pub fn semantic_propagate(
    x0: ArrayView2<'_, f64>,
    graph: &SparseAdjacency,
    layers: usize,
) -> Result<Array2<f64>> {
    if layers == 0 {
        return Err(EgraError::Argument("semantic propagation needs at least one layer".into()));
    }
    let mut x = graph.mul_dense(x0)?;
    for _ in 1..layers {
        x = graph.mul_dense(x.view())?;
    }
    Ok(x)
}

/// Users as normalized sums of their train items:
/// `(D_u^{-1/2} R D_i^{-1/2}) X`. Users without interactions get zero rows.
pub fn aggregate_user_modality(
    item_reps: ArrayView2<'_, f64>,
    r: &SparseAdjacency,
) -> Result<Array2<f64>> {
    r.bipartite_normalize()?.mul_dense(item_reps)
}
