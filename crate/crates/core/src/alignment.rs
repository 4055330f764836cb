//! Bi-level dynamic alignment weighting and the interaction-aware contrastive
//! alignment loss between behavior and modality representations.
//!
//! For a positive pair `(u, i)` the user-side loss is
//!
//! ```text
//! -log( (exp(cos(b_u, m_u)/t2) + phi(b_u, m_u, f_i | t3))
//!     / (sum_{v in B_u} exp(cos(b_u, m_v)/t2) + sum_{j in B_i} phi(b_u, m_u, f_j | t3)) )
//! phi(x, y, a | t) = exp(cos(x, a)/t) + exp(cos(y, a)/t)
//! f = (b + m) / 2
//! ```
//!
//! The item side is the same expression with users and items swapped.
//! Each side is weighted by `epoch_weight * entity_weight`, where entity
//! weights are a softmax over the batch of the misalignment `1 - cos(b, m)`
//! and are treated as constants when differentiating.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{EgraError, Result};
use crate::ops::{cosine, CosineMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Warm-up epochs.
    pub warmup: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl Default for AlignmentSchedule {
    fn default() -> Self {
        AlignmentSchedule {
            lambda_min: 0.01,
            lambda_max: 0.04,
            warmup: 10,
            tau1: 1.0,
            tau2: 0.2,
            tau3: 0.2,
        }
    }
}

impl AlignmentSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max) {
            return Err(EgraError::Config(format!(
                "need 0 <= lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.warmup == 0 {
            return Err(EgraError::Config("warm-up epoch count must be at least 1".into()));
        }
        if [self.tau1, self.tau2, self.tau3].iter().any(|&t| t <= 0.0 || !t.is_finite()) {
            return Err(EgraError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the bi-level weighting are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WeightingMode {
    /// Softmax entity weights; otherwise uniform `1/|B|`.
    pub entity_wise: bool,
    /// Linear warm-up; otherwise `lambda_max` from epoch 0.
    pub epoch_wise: bool,
}

impl WeightingMode {
    pub const FULL: WeightingMode = WeightingMode {
        entity_wise: true,
        epoch_wise: true,
    };
}

/// Linear warm-up from `lambda_min` to `lambda_max` over `warmup` epochs.
pub fn epoch_weight(epoch: usize, sched: &AlignmentSchedule) -> f64 {
    if epoch >= sched.warmup {
        sched.lambda_max
    } else {
        sched.lambda_min
            + (epoch as f64 / sched.warmup as f64) * (sched.lambda_max - sched.lambda_min)
    }
}

/// Softmax over the batch of `(1 - cos(b_k, m_k)) / tau1`.
pub fn entity_weights(
    behavior: ArrayView2<'_, f64>,
    modality: ArrayView2<'_, f64>,
    tau1: f64,
) -> Result<Array1<f64>> {
    if behavior.nrows() == 0 {
        return Err(EgraError::Argument("entity weights need a nonempty batch".into()));
    }
    if behavior.dim() != modality.dim() {
        return Err(EgraError::Shape(format!(
            "{:?} vs {:?}",
            behavior.dim(),
            modality.dim()
        )));
    }
    let logits: Array1<f64> = behavior
        .outer_iter()
        .zip(modality.outer_iter())
        .map(|(b, m)| (1.0 - cosine(b, m)) / tau1)
        .collect();
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|l| (l - max).exp());
    let total = exp.sum();
    Ok(exp / total)
}

pub fn combined_weight(entity: ArrayView1<'_, f64>, epoch: f64) -> Array1<f64> {
    &entity * epoch
}

/// Final per-entity weights of one side of a batch under `mode`.
pub fn side_weights(
    behavior: ArrayView2<'_, f64>,
    modality: ArrayView2<'_, f64>,
    sched: &AlignmentSchedule,
    epoch: usize,
    mode: WeightingMode,
) -> Result<Array1<f64>> {
    let n = behavior.nrows();
    let entity = if mode.entity_wise {
        entity_weights(behavior, modality, sched.tau1)?
    } else {
        Array1::from_elem(n, 1.0 / n as f64)
    };
    let lambda = if mode.epoch_wise {
        epoch_weight(epoch, sched)
    } else {
        sched.lambda_max
    };
    Ok(combined_weight(entity.view(), lambda))
}

pub fn phi(
    e1: ArrayView1<'_, f64>,
    e2: ArrayView1<'_, f64>,
    e3: ArrayView1<'_, f64>,
    tau: f64,
) -> f64 {
    (cosine(e1, e3) / tau).exp() + (cosine(e2, e3) / tau).exp()
}

/// One side of a batch: the distinct entities with their behavior and
/// modality vectors.
#[derive(Debug, Clone)]
pub struct SideView {
    pub ids: Vec<usize>,
    pub behavior: Array2<f64>,
    pub modality: Array2<f64>,
}

impl SideView {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(b + m) / 2`.
    pub fn fused(&self) -> Array2<f64> {
        (&self.behavior + &self.modality) / 2.0
    }
}

/// Entities and positive pairs of one training batch. `pairs` index into
/// `users` and `items`.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub users: SideView,
    pub items: SideView,
    pub pairs: Vec<(usize, usize)>,
}

impl BatchView {
    /// Gathers the distinct users and items of `pairs` (given as global ids)
    /// from the behavior and modality tables.
    pub fn gather(
        pairs: &[(usize, usize)],
        user_behavior: ArrayView2<'_, f64>,
        user_modality: ArrayView2<'_, f64>,
        item_behavior: ArrayView2<'_, f64>,
        item_modality: ArrayView2<'_, f64>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(EgraError::Argument("alignment batch is empty".into()));
        }
        let mut users: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut items: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        let local = pairs
            .iter()
            .map(|&(u, i)| {
                (
                    users.binary_search(&u).unwrap(),
                    items.binary_search(&i).unwrap(),
                )
            })
            .collect();
        let side = |ids: Vec<usize>, b: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>| SideView {
            behavior: b.select(Axis(0), &ids),
            modality: m.select(Axis(0), &ids),
            ids,
        };
        Ok(BatchView {
            users: side(users, user_behavior, user_modality),
            items: side(items, item_behavior, item_modality),
            pairs: local,
        })
    }

    /// The same batch seen from the item side.
    pub fn swapped(&self) -> BatchView {
        BatchView {
            users: self.items.clone(),
            items: self.users.clone(),
            pairs: self.pairs.iter().map(|&(u, i)| (i, u)).collect(),
        }
    }
}

/// Unweighted loss of pair `pair` taken from the `users` side of `batch`.
/// Direct evaluation, used as a reference for [`side_loss`].
pub fn user_alignment_loss(batch: &BatchView, pair: usize, tau2: f64, tau3: f64) -> Result<f64> {
    let &(u, i) = batch
        .pairs
        .get(pair)
        .ok_or_else(|| EgraError::Argument(format!("pair {pair} not in batch")))?;
    let b = batch.users.behavior.row(u);
    let m = batch.users.modality.row(u);
    let item_fused = batch.items.fused();
    let numerator = (cosine(b, m) / tau2).exp() + phi(b, m, item_fused.row(i), tau3);
    let mut denominator = 0.0;
    for mv in batch.users.modality.outer_iter() {
        denominator += (cosine(b, mv) / tau2).exp();
    }
    for fj in item_fused.outer_iter() {
        denominator += phi(b, m, fj, tau3);
    }
    Ok(-(numerator / denominator).ln())
}

/// Loss and gradients of one side of a batch.
#[derive(Debug, Clone)]
pub struct SideLoss {
    pub loss: f64,
    pub anchor_behavior: Array2<f64>,
    pub anchor_modality: Array2<f64>,
    pub partner_behavior: Array2<f64>,
    pub partner_modality: Array2<f64>,
}

/// `sum over pairs (a, p) of weights[a] * loss(a, p)`, with anchors taken
/// from `batch.users` and partners from `batch.items`, plus its gradient
/// with respect to all four vector tables. Weights are constants.
pub fn side_loss(batch: &BatchView, weights: ArrayView1<'_, f64>, tau2: f64, tau3: f64) -> SideLoss {
    let anchors = &batch.users;
    let partners = &batch.items;
    let partner_fused = partners.fused();

    let c_bm = CosineMatrix::new(anchors.behavior.view(), anchors.modality.view());
    let c_bf = CosineMatrix::new(anchors.behavior.view(), partner_fused.view());
    let c_mf = CosineMatrix::new(anchors.modality.view(), partner_fused.view());
    let t_bm = c_bm.cos.mapv(|c| (c / tau2).exp());
    let x_bf = c_bf.cos.mapv(|c| (c / tau3).exp());
    let x_mf = c_mf.cos.mapv(|c| (c / tau3).exp());
    let phi = &x_bf + &x_mf;
    let denom = t_bm.sum_axis(Axis(1)) + phi.sum_axis(Axis(1));

    let na = anchors.len();
    let mut loss = 0.0;
    // d loss / d term, split into the shared denominator part (per anchor)
    // and the numerator part (per anchor and partner).
    let mut g_den = Array1::<f64>::zeros(na);
    let mut g_num_self = Array1::<f64>::zeros(na);
    let mut g_num_partner = Array2::<f64>::zeros(phi.raw_dim());
    for &(a, p) in &batch.pairs {
        let w = weights[a];
        let numerator = t_bm[[a, a]] + phi[[a, p]];
        loss += w * (denom[a].ln() - numerator.ln());
        g_den[a] += w / denom[a];
        g_num_self[a] += w / numerator;
        g_num_partner[[a, p]] += w / numerator;
    }

    let mut d_bm = &t_bm * &g_den.view().insert_axis(Axis(1));
    for a in 0..na {
        d_bm[[a, a]] -= t_bm[[a, a]] * g_num_self[a];
    }
    d_bm /= tau2;
    let coef = &g_num_partner * -1.0 + &g_den.view().insert_axis(Axis(1));
    let d_bf = &x_bf * &coef / tau3;
    let d_mf = &x_mf * &coef / tau3;

    let (mut d_ab, d_am_from_bm) = c_bm.backward(d_bm.view());
    let (d_ab_f, d_pf_b) = c_bf.backward(d_bf.view());
    let (d_am_f, d_pf_m) = c_mf.backward(d_mf.view());
    d_ab += &d_ab_f;
    let d_am = d_am_from_bm + d_am_f;
    let d_pf = (d_pf_b + d_pf_m) / 2.0;

    SideLoss {
        loss,
        anchor_behavior: d_ab,
        anchor_modality: d_am,
        partner_behavior: d_pf.clone(),
        partner_modality: d_pf,
    }
}

/// Weighted alignment loss of a batch (user side plus item side) and the
/// gradients on each side's behavior and modality vectors.
#[derive(Debug, Clone)]
pub struct BatchAlignment {
    pub loss: f64,
    pub user_behavior: Array2<f64>,
    pub user_modality: Array2<f64>,
    pub item_behavior: Array2<f64>,
    pub item_modality: Array2<f64>,
}

/// Per-entity weights for both sides of a batch.
#[derive(Debug, Clone)]
pub struct AlignmentWeights {
    pub users: Array1<f64>,
    pub items: Array1<f64>,
}

impl AlignmentWeights {
    pub fn compute(
        batch: &BatchView,
        sched: &AlignmentSchedule,
        epoch: usize,
        mode: WeightingMode,
    ) -> Result<Self> {
        Ok(AlignmentWeights {
            users: side_weights(
                batch.users.behavior.view(),
                batch.users.modality.view(),
                sched,
                epoch,
                mode,
            )?,
            items: side_weights(
                batch.items.behavior.view(),
                batch.items.modality.view(),
                sched,
                epoch,
                mode,
            )?,
        })
    }
}

pub fn batch_alignment_loss(
    batch: &BatchView,
    weights: &AlignmentWeights,
    tau2: f64,
    tau3: f64,
) -> BatchAlignment {
    let user_side = side_loss(batch, weights.users.view(), tau2, tau3);
    let item_side = side_loss(&batch.swapped(), weights.items.view(), tau2, tau3);
    BatchAlignment {
        loss: user_side.loss + item_side.loss,
        user_behavior: user_side.anchor_behavior + item_side.partner_behavior,
        user_modality: user_side.anchor_modality + item_side.partner_modality,
        item_behavior: item_side.anchor_behavior + user_side.partner_behavior,
        item_modality: item_side.anchor_modality + user_side.partner_modality,
    }
}
