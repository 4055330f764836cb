//! Training: BPR + weighted alignment + L2 objective, Adam updates, early
//! stopping on validation Recall@20, and the pretraining backbone.

use std::time::Instant;

use log::{info, warn};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    batch_alignment_loss, AlignmentSchedule, AlignmentWeights, BatchView, WeightingMode,
};
use crate::dataset::{epoch_batches, InteractionDataset, Split, Triple};
use crate::error::{EgraError, Result};
use crate::evaluator::evaluate;
use crate::features::ModalityFeatureSet;
use crate::model::{EgraModel, ModelDims, ModelState};
use crate::ops::{sigmoid, softplus};
use crate::sparse::SparseAdjacency;

/// Component switches. Each flag removes one mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the item-item block of the behavior graph.
    pub ebg: bool,
    /// Drop both levels of dynamic alignment weighting.
    pub bda: bool,
    /// Uniform instead of misalignment-softmax entity weights.
    pub en: bool,
    /// Constant `lambda_max` instead of the warm-up schedule.
    pub ep: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        ebg: false,
        bda: false,
        en: false,
        ep: false,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::NONE;
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => {}
            "ebg" => a.ebg = true,
            "bda" => a.bda = true,
            "en" => a.en = true,
            "ep" => a.ep = true,
            other => {
                return Err(EgraError::Config(format!(
                    "unknown ablation '{other}' (expected ebg, bda, en, ep or none)"
                )))
            }
        }
        Ok(a)
    }

    /// Variant label in the `EGRA/<flag>` style.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.ebg, "EBG"), (self.bda, "BDA"), (self.en, "EN"), (self.ep, "EP")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "EGRA".to_string()
        } else {
            format!("EGRA/{}", parts.join("+"))
        }
    }

    pub fn weighting(&self) -> WeightingMode {
        WeightingMode {
            entity_wise: !(self.bda || self.en),
            epoch_wise: !(self.bda || self.ep),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub semantic_layers: usize,
    /// Coefficient of the L2 term.
    pub reg_weight: f64,
    /// Set from the experiment's `align` table.
    #[serde(skip)]
    pub schedule: AlignmentSchedule,
    pub patience: usize,
    pub max_epochs: usize,
    /// Set from the experiment's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
    /// Set from the experiment's top-level `ablation`.
    #[serde(skip)]
    pub ablation: Ablation,
    /// Cut-off of the early-stopping recall.
    pub valid_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2048,
            dim: 64,
            layers: 3,
            semantic_layers: 1,
            reg_weight: 1e-4,
            schedule: AlignmentSchedule::default(),
            patience: 20,
            max_epochs: 1000,
            seed: 2024,
            ablation: Ablation::NONE,
            valid_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.dim == 0 {
            return Err(EgraError::Config(
                "learning rate, batch size and dimension must be positive".into(),
            ));
        }
        if self.patience == 0 || self.semantic_layers == 0 {
            return Err(EgraError::Config(
                "patience and semantic layers must be at least 1".into(),
            ));
        }
        if self.reg_weight < 0.0 {
            return Err(EgraError::Config("reg_weight must be nonnegative".into()));
        }
        self.schedule.validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            dim: self.dim,
            layers: self.layers,
            semantic_layers: self.semantic_layers,
        }
    }
}

/// Random stream ids; every consumer of randomness gets its own stream of
/// the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLING: u64 = 2;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `E_u · E_i` on a table holding users first and items after them.
pub fn score(e: ArrayView2<'_, f64>, num_users: usize, u: usize, i: usize) -> f64 {
    e.row(u).dot(&e.row(num_users + i))
}

/// Sum of `-log sigmoid(y_ui - y_uj)` over the triples.
pub fn bpr_loss(triples: &[Triple], e: ArrayView2<'_, f64>, num_users: usize) -> Result<f64> {
    if triples.is_empty() {
        return Err(EgraError::Argument("BPR loss needs at least one triple".into()));
    }
    let total: f64 = triples
        .iter()
        .map(|&(u, i, j)| softplus(-(score(e, num_users, u, i) - score(e, num_users, u, j))))
        .sum();
    Ok(total)
}

/// Accumulates the gradient of [`bpr_loss`] into `grad`.
fn bpr_backward(triples: &[Triple], e: ArrayView2<'_, f64>, num_users: usize, grad: &mut Array2<f64>) {
    for &(u, i, j) in triples {
        let (ri, rj) = (num_users + i, num_users + j);
        let margin = score(e, num_users, u, i) - score(e, num_users, u, j);
        let g = -sigmoid(-margin);
        let diff = &e.row(ri) - &e.row(rj);
        grad.row_mut(u).scaled_add(g, &diff);
        grad.row_mut(ri).scaled_add(g, &e.row(u));
        grad.row_mut(rj).scaled_add(-g, &e.row(u));
    }
}

/// Distinct table rows touched by a batch.
fn touched_rows(triples: &[Triple], num_users: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = triples
        .iter()
        .flat_map(|&(u, i, j)| [u, num_users + i, num_users + j])
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub align: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.bpr + self.align + self.reg
    }
}

/// Objective of one batch and its gradient with respect to every parameter.
///
/// The L2 term is `reg_weight * ||E_rows||_F` over the distinct rows of the
/// fused table touched by the batch. Entity weights are computed from the
/// current state unless `weights` is given; either way they are constants
/// for the gradient.
pub fn total_loss(
    model: &EgraModel,
    state: &ModelState,
    triples: &[Triple],
    epoch: usize,
    config: &TrainConfig,
    weights: Option<&AlignmentWeights>,
) -> Result<(LossBreakdown, ModelState)> {
    if triples.is_empty() {
        return Err(EgraError::Argument("empty batch".into()));
    }
    let u = model.num_users;
    let fwd = model.forward(state)?;
    let e = fwd.fused.view();
    let mut losses = LossBreakdown {
        bpr: bpr_loss(triples, e, u)?,
        ..Default::default()
    };
    let mut grad_fused = Array2::zeros(fwd.fused.raw_dim());
    bpr_backward(triples, e, u, &mut grad_fused);

    let rows = touched_rows(triples, u);
    let sub = e.select(Axis(0), &rows);
    let norm = sub.iter().map(|v| v * v).sum::<f64>().sqrt();
    losses.reg = config.reg_weight * norm;
    if norm > 0.0 && config.reg_weight > 0.0 {
        for (k, &r) in rows.iter().enumerate() {
            grad_fused
                .row_mut(r)
                .scaled_add(config.reg_weight / norm, &sub.row(k));
        }
    }

    let mut grad_behavior = Array2::zeros(fwd.fused.raw_dim());
    let mut grad_modality = Array2::zeros(fwd.fused.raw_dim());
    let pairs: Vec<(usize, usize)> = triples.iter().map(|&(u, i, _)| (u, i)).collect();
    let e_b = fwd.behavior.view();
    let e_m = fwd.modality().view();
    let batch = BatchView::gather(
        &pairs,
        e_b.slice(s![..u, ..]),
        e_m.slice(s![..u, ..]),
        e_b.slice(s![u.., ..]),
        e_m.slice(s![u.., ..]),
    )?;
    let computed;
    let weights = match weights {
        Some(w) => w,
        None => {
            computed = AlignmentWeights::compute(
                &batch,
                &config.schedule,
                epoch,
                config.ablation.weighting(),
            )?;
            &computed
        }
    };
    if weights.users.iter().chain(weights.items.iter()).any(|&w| w != 0.0) {
        let s = &config.schedule;
        let al = batch_alignment_loss(&batch, weights, s.tau2, s.tau3);
        losses.align = al.loss;
        for (k, &id) in batch.users.ids.iter().enumerate() {
            grad_behavior.row_mut(id).scaled_add(1.0, &al.user_behavior.row(k));
            grad_modality.row_mut(id).scaled_add(1.0, &al.user_modality.row(k));
        }
        for (k, &id) in batch.items.ids.iter().enumerate() {
            grad_behavior.row_mut(u + id).scaled_add(1.0, &al.item_behavior.row(k));
            grad_modality.row_mut(u + id).scaled_add(1.0, &al.item_modality.row(k));
        }
    }

    if !(losses.bpr.is_finite() && losses.align.is_finite() && losses.reg.is_finite()) {
        return Err(EgraError::Divergence(format!(
            "non-finite loss at epoch {epoch}: bpr={} align={} reg={}",
            losses.bpr, losses.align, losses.reg
        )));
    }
    let grad = model.backward(
        state,
        &fwd,
        grad_fused.view(),
        grad_behavior.view(),
        grad_modality.view(),
    )?;
    Ok((losses, grad))
}

/// Alignment weights the trainer would use for `triples` at `epoch`.
pub fn alignment_weights(
    model: &EgraModel,
    state: &ModelState,
    triples: &[Triple],
    epoch: usize,
    config: &TrainConfig,
) -> Result<AlignmentWeights> {
    let u = model.num_users;
    let fwd = model.forward(state)?;
    let pairs: Vec<(usize, usize)> = triples.iter().map(|&(u, i, _)| (u, i)).collect();
    let e_b = fwd.behavior.view();
    let e_m = fwd.modality().view();
    let batch = BatchView::gather(
        &pairs,
        e_b.slice(s![..u, ..]),
        e_m.slice(s![..u, ..]),
        e_b.slice(s![u.., ..]),
        e_m.slice(s![u.., ..]),
    )?;
    AlignmentWeights::compute(&batch, &config.schedule, epoch, config.ablation.weighting())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelState,
    v: ModelState,
}

impl Adam {
    pub fn new(learning_rate: f64, like: &ModelState) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grad: &ModelState) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.learning_rate;
        let eps = self.eps;
        for (((p, g), m), v) in state
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub align: f64,
    pub reg: f64,
    pub valid_recall: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the best validation epoch.
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl FitResult {
    /// History as JSON lines.
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Trains from a fresh initialization and returns the best-validation
/// checkpoint. Without a validation split, runs `max_epochs` and returns the
/// final state.
pub fn fit(model: &EgraModel, ds: &InteractionDataset, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let mut init_rng = stream_rng(config.seed, streams::INIT);
    let mut sample_rng = stream_rng(config.seed, streams::SAMPLING);
    let mut state = model.init_state(&mut init_rng);
    let mut adam = Adam::new(config.learning_rate, &state);
    let has_valid = !ds.valid.is_empty();
    if !has_valid {
        warn!("validation split is empty; training for a fixed {} epochs", config.max_epochs);
    }

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let batches = epoch_batches(ds, config.batch_size, &mut sample_rng)?;
        let mut sums = LossBreakdown::default();
        for batch in &batches {
            let (losses, grad) = total_loss(model, &state, batch, epoch, config, None)?;
            adam.step(&mut state, &grad);
            if let Some(name) = state.first_non_finite() {
                return Err(EgraError::Divergence(format!(
                    "parameter '{name}' became non-finite at epoch {epoch}"
                )));
            }
            sums.bpr += losses.bpr;
            sums.align += losses.align;
            sums.reg += losses.reg;
        }

        let valid_recall = if has_valid {
            let fwd = model.forward(&state)?;
            evaluate(fwd.fused.view(), ds, Split::Valid, &[config.valid_k])?.recall_at(config.valid_k)
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            bpr: sums.bpr,
            align: sums.align,
            reg: sums.reg,
            valid_recall,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: bpr={:.4} align={:.4} reg={:.4} valid R@{}={:.4}",
            record.bpr, record.align, record.reg, config.valid_k, valid_recall
        );
        history.push(record);

        if !has_valid {
            continue;
        }
        if best.as_ref().is_none_or(|b| valid_recall > b.1) {
            best = Some((epoch, valid_recall, state.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                info!("early stop at epoch {epoch}");
                break;
            }
        }
    }

    let (best_epoch, best_valid, state) = match best {
        Some(b) => b,
        None => (history.len().saturating_sub(1), 0.0, state),
    };
    Ok(FitResult {
        state,
        history,
        best_epoch,
        best_valid,
    })
}

/// Settings of the pretraining backbone: plain bipartite graph and constant
/// uniform alignment weights. The unused warm-up fields are pinned so equal
/// backbones get equal settings.
pub fn pretrain_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        ablation: Ablation {
            ebg: true,
            bda: true,
            en: true,
            ep: true,
        },
        schedule: AlignmentSchedule {
            lambda_min: config.schedule.lambda_max,
            warmup: 1,
            ..config.schedule
        },
        ..config.clone()
    }
}

/// Trains the backbone and returns the item rows of its fused table as the
/// pretrained item embeddings (`|I| x d`).
pub fn pretrain_backbone(
    ds: &InteractionDataset,
    features: &ModalityFeatureSet,
    semantic_graphs: &[SparseAdjacency],
    config: &TrainConfig,
) -> Result<Array2<f32>> {
    let cfg = pretrain_config(config);
    let model = EgraModel::new(ds, features, None, semantic_graphs, cfg.dims())?;
    let result = fit(&model, ds, &cfg)?;
    let fused = model.forward(&result.state)?.fused;
    Ok(fused.slice(s![ds.num_users.., ..]).mapv(|v| v as f32))
}
