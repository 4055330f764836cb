//! Disentangled modality fusion: an attention-weighted shared component plus
//! behavior-gated modality-exclusive residuals.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{EgraError, Result};
use crate::ops::{col_sum, sigmoid, xavier_uniform};

/// Attention parameters shared by all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_a: Array2<f64>,
    pub b_a: Array1<f64>,
    pub v_a: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            w_a: Array2::zeros((dim, dim)),
            b_a: Array1::zeros(dim),
            v_a: Array1::zeros(dim),
        }
    }

    /// Xavier `W_a`, zero `b_a`, small uniform `V_a`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_a: xavier_uniform(dim, dim, dim, dim, rng),
            b_a: Array1::zeros(dim),
            v_a: xavier_uniform(1, dim, dim, 1, rng).into_shape_with_order(dim).unwrap(),
        }
    }
}

/// Per-modality preference gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_p: Array2<f64>,
    pub b_p: Array1<f64>,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        GateParams {
            w_p: Array2::zeros((dim, dim)),
            b_p: Array1::zeros(dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        GateParams {
            w_p: xavier_uniform(dim, dim, dim, dim, rng),
            b_p: Array1::zeros(dim),
        }
    }
}

/// `tanh(E W_a + b_a) V_a^T`, one score per row.
pub fn attention_score(e_hat: ArrayView2<'_, f64>, params: &AttentionParams) -> Array1<f64> {
    attention_hidden(e_hat, params).dot(&params.v_a)
}

fn attention_hidden(e_hat: ArrayView2<'_, f64>, params: &AttentionParams) -> Array2<f64> {
    (e_hat.dot(&params.w_a) + &params.b_a).mapv_into(f64::tanh)
}

/// Per-row softmax over modality scores; returns `(E_s, weights)` with
/// `weights` shaped `rows x |M|`.
pub fn shared_representation(
    e_hats: &[Array2<f64>],
    params: &AttentionParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let hidden: Vec<_> = e_hats.iter().map(|e| attention_hidden(e.view(), params)).collect();
    let weights = modality_softmax(&hidden, params)?;
    Ok((weighted_sum(e_hats, &weights), weights))
}

fn modality_softmax(hidden: &[Array2<f64>], params: &AttentionParams) -> Result<Array2<f64>> {
    let Some(first) = hidden.first() else {
        return Err(EgraError::Argument("fusion needs at least one modality".into()));
    };
    let rows = first.nrows();
    let mut scores = Array2::zeros((rows, hidden.len()));
    for (m, h) in hidden.iter().enumerate() {
        scores.column_mut(m).assign(&h.dot(&params.v_a));
    }
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - max).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(scores)
}

fn weighted_sum(e_hats: &[Array2<f64>], weights: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(e_hats[0].raw_dim());
    for (m, e) in e_hats.iter().enumerate() {
        let w = weights.column(m).insert_axis(Axis(1));
        out += &(e * &w);
    }
    out
}

/// `sigmoid(E_B W_p + b_p)`.
pub fn preference_gate(e_b: ArrayView2<'_, f64>, gate: &GateParams) -> Array2<f64> {
    (e_b.dot(&gate.w_p) + &gate.b_p).mapv_into(sigmoid)
}

/// `(E_s + sum_m P_m * (E_m - E_s)) / (|M| + 1)`.
///
/// The leading factor makes this a shrunk sum, not a convex combination:
/// with every modality equal to `E_s` the result is `E_s / (|M| + 1)`.
pub fn fuse_modalities(
    e_s: ArrayView2<'_, f64>,
    e_hats: &[Array2<f64>],
    gates: &[Array2<f64>],
) -> Result<Array2<f64>> {
    if e_hats.is_empty() || e_hats.len() != gates.len() {
        return Err(EgraError::Argument(format!(
            "fusion got {} modalities and {} gates",
            e_hats.len(),
            gates.len()
        )));
    }
    let mut acc = e_s.to_owned();
    for (e, p) in e_hats.iter().zip(gates) {
        acc += &(p * &(e - &e_s));
    }
    acc /= (e_hats.len() + 1) as f64;
    Ok(acc)
}

/// `E = E_B + E_M`.
pub fn final_fuse(e_b: ArrayView2<'_, f64>, e_m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if e_b.dim() != e_m.dim() {
        return Err(EgraError::Shape(format!("{:?} vs {:?}", e_b.dim(), e_m.dim())));
    }
    Ok(&e_b + &e_m)
}

/// Intermediates of [`Fusion::forward`].
#[derive(Debug, Clone)]
pub struct Fusion {
    pub hidden: Vec<Array2<f64>>,
    pub weights: Array2<f64>,
    pub shared: Array2<f64>,
    pub gates: Vec<Array2<f64>>,
    pub fused: Array2<f64>,
}

/// Gradients produced by [`Fusion::backward`].
pub struct FusionGrad {
    pub e_hats: Vec<Array2<f64>>,
    pub e_b: Array2<f64>,
    pub attention: AttentionParams,
    pub gates: Vec<GateParams>,
}

impl Fusion {
    pub fn forward(
        e_b: ArrayView2<'_, f64>,
        e_hats: &[Array2<f64>],
        attention: &AttentionParams,
        gate_params: &[GateParams],
    ) -> Result<Self> {
        if gate_params.len() != e_hats.len() {
            return Err(EgraError::Argument("one gate per modality required".into()));
        }
        let hidden: Vec<_> = e_hats.iter().map(|e| attention_hidden(e.view(), attention)).collect();
        let weights = modality_softmax(&hidden, attention)?;
        let shared = weighted_sum(e_hats, &weights);
        let gates: Vec<_> = gate_params.iter().map(|g| preference_gate(e_b, g)).collect();
        let fused = fuse_modalities(shared.view(), e_hats, &gates)?;
        Ok(Fusion {
            hidden,
            weights,
            shared,
            gates,
            fused,
        })
    }

    pub fn backward(
        &self,
        e_b: ArrayView2<'_, f64>,
        e_hats: &[Array2<f64>],
        attention: &AttentionParams,
        gate_params: &[GateParams],
        grad_fused: ArrayView2<'_, f64>,
    ) -> FusionGrad {
        let c = 1.0 / (e_hats.len() + 1) as f64;
        let mut d_e_b = Array2::zeros(e_b.raw_dim());
        let mut d_shared = grad_fused.to_owned() * c;
        let mut d_e_hats = Vec::with_capacity(e_hats.len());
        let mut d_gates = Vec::with_capacity(e_hats.len());
        for ((e, p), gp) in e_hats.iter().zip(&self.gates).zip(gate_params) {
            d_shared -= &(&grad_fused * p * c);
            d_e_hats.push(&grad_fused * p * c);
            let d_p = &grad_fused * &(e - &self.shared) * c;
            let d_z = d_p * &p.mapv(|g| g * (1.0 - g));
            d_e_b += &d_z.dot(&gp.w_p.t());
            d_gates.push(GateParams {
                w_p: e_b.t().dot(&d_z),
                b_p: col_sum(d_z.view()),
            });
        }

        // shared = sum_m weights_m * E_m
        let mut d_weights = Array2::zeros(self.weights.raw_dim());
        for (m, e) in e_hats.iter().enumerate() {
            let w = self.weights.column(m).insert_axis(Axis(1));
            d_e_hats[m] += &(&d_shared * &w);
            d_weights.column_mut(m).assign(&(&d_shared * e).sum_axis(Axis(1)));
        }
        let mean = (&d_weights * &self.weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = &self.weights * &(d_weights - &mean);

        let mut d_att = AttentionParams::zeros(attention.v_a.len());
        for (m, (e, h)) in e_hats.iter().zip(&self.hidden).enumerate() {
            let ds = d_scores.column(m);
            d_att.v_a += &h.t().dot(&ds);
            let d_h = ds.insert_axis(Axis(1)).to_owned() * &attention.v_a;
            let d_q = d_h * &h.mapv(|t| 1.0 - t * t);
            d_att.w_a += &e.t().dot(&d_q);
            d_att.b_a += &col_sum(d_q.view());
            d_e_hats[m] += &d_q.dot(&attention.w_a.t());
        }
        FusionGrad {
            e_hats: d_e_hats,
            e_b: d_e_b,
            attention: d_att,
            gates: d_gates,
        }
    }
}
