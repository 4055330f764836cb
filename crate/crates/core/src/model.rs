//! The full model: frozen graphs and features ([`EgraModel`]), trainable
//! tensors ([`ModelState`]), and the forward and backward passes tying the
//! behavior, modality and fusion branches together.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::behavior::{propagate_lightgcn, propagate_lightgcn_backward};
use crate::dataset::InteractionDataset;
use crate::error::{EgraError, Result};
use crate::features::ModalityFeatureSet;
use crate::fusion::{AttentionParams, Fusion, GateParams};
use crate::knn_graph::{build_enhanced_adjacency, build_bipartite_adjacency, topk_weighted_graph};
use crate::modality::{
    project_modality_backward, project_modality_cached, semantic_propagate, ModalityProjector,
    Projection,
};
use crate::ops::xavier_uniform;
use crate::sparse::SparseAdjacency;

fn flat1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn as_row(a: &Array1<f64>) -> ArrayView2<'_, f64> {
    a.view().insert_axis(Axis(0))
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// ID embeddings, users first then items.
    pub embeddings: Array2<f64>,
    pub projectors: Vec<ModalityProjector>,
    pub attention: AttentionParams,
    pub gates: Vec<GateParams>,
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(
        num_nodes: usize,
        dim: usize,
        input_dims: &[usize],
        rng: &mut R,
    ) -> Self {
        ModelState {
            embeddings: xavier_uniform(num_nodes, dim, num_nodes, dim, rng),
            projectors: input_dims
                .iter()
                .map(|&d_m| ModalityProjector::xavier(dim, d_m, rng))
                .collect(),
            attention: AttentionParams::init(dim, rng),
            gates: input_dims.iter().map(|_| GateParams::init(dim, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| t.to_slice().expect("parameters are contiguous"))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embeddings.as_slice_mut().expect("contiguous"));
        for p in &mut self.projectors {
            out.push(p.w1.as_slice_mut().expect("contiguous"));
            out.push(flat1(&mut p.b1));
            out.push(p.w2.as_slice_mut().expect("contiguous"));
            out.push(flat1(&mut p.b2));
        }
        out.push(self.attention.w_a.as_slice_mut().expect("contiguous"));
        out.push(flat1(&mut self.attention.b_a));
        out.push(flat1(&mut self.attention.v_a));
        for g in &mut self.gates {
            out.push(g.w_p.as_slice_mut().expect("contiguous"));
            out.push(flat1(&mut g.b_p));
        }
        out
    }

    /// Tensors as 2-D views (vectors as single rows) with stable names.
    pub fn named_tensors(&self) -> Vec<(String, ArrayView2<'_, f64>)> {
        let mut out = vec![("embeddings".to_string(), self.embeddings.view())];
        for (m, p) in self.projectors.iter().enumerate() {
            out.push((format!("projector{m}.w1"), p.w1.view()));
            out.push((format!("projector{m}.b1"), as_row(&p.b1)));
            out.push((format!("projector{m}.w2"), p.w2.view()));
            out.push((format!("projector{m}.b2"), as_row(&p.b2)));
        }
        out.push(("attention.w_a".into(), self.attention.w_a.view()));
        out.push(("attention.b_a".into(), as_row(&self.attention.b_a)));
        out.push(("attention.v_a".into(), as_row(&self.attention.v_a)));
        for (m, g) in self.gates.iter().enumerate() {
            out.push((format!("gate{m}.w_p"), g.w_p.view()));
            out.push((format!("gate{m}.b_p"), as_row(&g.b_p)));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Layer counts and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub dim: usize,
    /// LightGCN layers on the behavior graph.
    pub layers: usize,
    /// Propagation layers on the item semantic graphs.
    pub semantic_layers: usize,
}

/// Everything the forward pass reads but never updates.
#[derive(Debug, Clone)]
pub struct EgraModel {
    pub num_users: usize,
    pub num_items: usize,
    pub dims: ModelDims,
    pub modality_names: Vec<String>,
    features: Vec<Array2<f64>>,
    /// Normalized enhanced behavior graph (symmetric).
    behavior_graph: SparseAdjacency,
    /// Normalized item-item graphs, one per modality (symmetric).
    semantic_graphs: Vec<SparseAdjacency>,
    r_hat: SparseAdjacency,
    r_hat_t: SparseAdjacency,
}

/// Builds one weighted Top-K graph per modality, in modality-name order.
pub fn build_semantic_graphs(
    features: &ModalityFeatureSet,
    k: usize,
) -> Result<Vec<SparseAdjacency>> {
    features
        .iter()
        .map(|(_, m)| topk_weighted_graph(m.view(), k))
        .collect()
}

impl EgraModel {
    /// `item_graph` is the item-item block of the behavior graph; `None`
    /// gives the plain bipartite graph. `semantic_graphs` are raw (not yet
    /// normalized) modality graphs in modality-name order. Negative cosine
    /// weights are clipped to zero before normalization.
    pub fn new(
        ds: &InteractionDataset,
        features: &ModalityFeatureSet,
        item_graph: Option<&SparseAdjacency>,
        semantic_graphs: &[SparseAdjacency],
        dims: ModelDims,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(EgraError::Argument("at least one modality is required".into()));
        }
        if semantic_graphs.len() != features.len() {
            return Err(EgraError::Argument(format!(
                "{} modalities but {} semantic graphs",
                features.len(),
                semantic_graphs.len()
            )));
        }
        if dims.semantic_layers == 0 {
            return Err(EgraError::Argument("semantic layer count must be at least 1".into()));
        }
        for (name, m) in features.iter() {
            if m.nrows() != ds.num_items {
                return Err(EgraError::Shape(format!(
                    "modality '{name}' has {} rows for {} items",
                    m.nrows(),
                    ds.num_items
                )));
            }
        }
        let raw = match item_graph {
            Some(g) => build_enhanced_adjacency(ds.r(), g)?,
            None => build_bipartite_adjacency(ds.r())?,
        };
        let semantic = semantic_graphs
            .iter()
            .map(|g| {
                if g.shape() != (ds.num_items, ds.num_items) {
                    return Err(EgraError::Shape(format!(
                        "semantic graph is {:?} for {} items",
                        g.shape(),
                        ds.num_items
                    )));
                }
                g.clip_negative().sym_normalize()
            })
            .collect::<Result<Vec<_>>>()?;
        let r_hat = ds.r().bipartite_normalize()?;
        Ok(EgraModel {
            num_users: ds.num_users,
            num_items: ds.num_items,
            dims,
            modality_names: features.modalities().map(str::to_string).collect(),
            features: features.iter().map(|(_, m)| m.mapv(|v| v as f64)).collect(),
            behavior_graph: raw.sym_normalize()?,
            semantic_graphs: semantic,
            r_hat_t: r_hat.transpose(),
            r_hat,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.ncols()).collect()
    }

    pub fn behavior_graph(&self) -> &SparseAdjacency {
        &self.behavior_graph
    }

    pub fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState {
        ModelState::init(self.num_nodes(), self.dims.dim, &self.input_dims(), rng)
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.embeddings.dim() != (self.num_nodes(), self.dims.dim)
            || state.projectors.len() != self.features.len()
            || state.gates.len() != self.features.len()
        {
            return Err(EgraError::Shape("model state does not match the model".into()));
        }
        Ok(())
    }

    pub fn forward(&self, state: &ModelState) -> Result<Forward> {
        self.check_state(state)?;
        let u = self.num_users;
        let behavior = propagate_lightgcn(
            state.embeddings.view(),
            &self.behavior_graph,
            self.dims.layers,
        )?;
        let behavior_items = behavior.slice(s![u.., ..]);

        let mut projections = Vec::with_capacity(self.features.len());
        let mut modality_reps = Vec::with_capacity(self.features.len());
        for ((features, proj), graph) in self
            .features
            .iter()
            .zip(&state.projectors)
            .zip(&self.semantic_graphs)
        {
            let projection = project_modality_cached(features.view(), proj)?;
            let purified = &projection.output * &behavior_items;
            let items = semantic_propagate(purified.view(), graph, self.dims.semantic_layers)?;
            let users = self.r_hat.mul_dense(items.view())?;
            let mut rep = Array2::zeros((self.num_nodes(), self.dims.dim));
            rep.slice_mut(s![..u, ..]).assign(&users);
            rep.slice_mut(s![u.., ..]).assign(&items);
            projections.push(projection);
            modality_reps.push(rep);
        }

        let fusion = Fusion::forward(
            behavior.view(),
            &modality_reps,
            &state.attention,
            &state.gates,
        )?;
        let fused = &behavior + &fusion.fused;
        Ok(Forward {
            behavior,
            projections,
            modality_reps,
            fusion,
            fused,
        })
    }

    /// Back-propagates gradients on the final table `E` and, separately, on
    /// `E_B` and `E_M` (alignment terms) to every parameter.
    pub fn backward(
        &self,
        state: &ModelState,
        fwd: &Forward,
        grad_fused: ArrayView2<'_, f64>,
        grad_behavior: ArrayView2<'_, f64>,
        grad_modality: ArrayView2<'_, f64>,
    ) -> Result<ModelState> {
        let u = self.num_users;
        let mut d_behavior = &grad_fused + &grad_behavior;
        let d_modality = &grad_fused + &grad_modality;

        let fg = fwd.fusion.backward(
            fwd.behavior.view(),
            &fwd.modality_reps,
            &state.attention,
            &state.gates,
            d_modality.view(),
        );
        d_behavior += &fg.e_b;

        let mut grad = ModelState {
            embeddings: Array2::zeros(state.embeddings.raw_dim()),
            projectors: Vec::with_capacity(state.projectors.len()),
            attention: fg.attention,
            gates: fg.gates,
        };

        let behavior_items = fwd.behavior.slice(s![u.., ..]);
        for (m, d_rep) in fg.e_hats.iter().enumerate() {
            let d_users = d_rep.slice(s![..u, ..]);
            let d_items = &d_rep.slice(s![u.., ..]) + &self.r_hat_t.mul_dense(d_users)?;
            // the normalized semantic graph is symmetric
            let mut d_x = d_items;
            for _ in 0..self.dims.semantic_layers {
                d_x = self.semantic_graphs[m].mul_dense(d_x.view())?;
            }
            let projection = &fwd.projections[m];
            let d_proj = &d_x * &behavior_items;
            d_behavior
                .slice_mut(s![u.., ..])
                .scaled_add(1.0, &(&d_x * &projection.output));
            grad.projectors.push(project_modality_backward(
                self.features[m].view(),
                &state.projectors[m],
                projection,
                d_proj.view(),
            ));
        }

        grad.embeddings = propagate_lightgcn_backward(
            d_behavior.view(),
            &self.behavior_graph,
            self.dims.layers,
        )?;
        Ok(grad)
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `E_B`
    pub behavior: Array2<f64>,
    pub projections: Vec<Projection>,
    /// `Ê_m`, users then items.
    pub modality_reps: Vec<Array2<f64>>,
    pub fusion: Fusion,
    /// `E = E_B + E_M`
    pub fused: Array2<f64>,
}

impl Forward {
    /// `E_M`
    pub fn modality(&self) -> &Array2<f64> {
        &self.fusion.fused
    }
}
