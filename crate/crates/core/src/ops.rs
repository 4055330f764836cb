//! Small dense helpers shared by the model layers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn col_sum(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

/// Xavier/Glorot uniform initialization over `U(-a, a)`,
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..=a))
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Row norms and unit rows; zero rows stay zero.
pub fn unit_rows(m: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let mut unit = m.to_owned();
    let mut norms = Array1::zeros(m.nrows());
    for (k, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        norms[k] = n;
        if n > 0.0 {
            row /= n;
        }
    }
    (unit, norms)
}

/// Pairwise cosine matrix between the rows of `a` and `b`, with the pieces
/// needed to back-propagate through it.
pub struct CosineMatrix {
    pub cos: Array2<f64>,
    a_unit: Array2<f64>,
    a_norm: Array1<f64>,
    b_unit: Array2<f64>,
    b_norm: Array1<f64>,
}

impl CosineMatrix {
    pub fn new(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Self {
        let (a_unit, a_norm) = unit_rows(a);
        let (b_unit, b_norm) = unit_rows(b);
        let cos = a_unit.dot(&b_unit.t());
        CosineMatrix {
            cos,
            a_unit,
            a_norm,
            b_unit,
            b_norm,
        }
    }

    /// Given `G = dL/dcos`, returns `(dL/da, dL/db)`.
    pub fn backward(&self, g: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let da_unit = g.dot(&self.b_unit);
        let db_unit = g.t().dot(&self.a_unit);
        (
            unit_backward(da_unit, &self.a_unit, &self.a_norm),
            unit_backward(db_unit, &self.b_unit, &self.b_norm),
        )
    }
}

/// Chain rule through `x -> x / |x|`.
fn unit_backward(mut d_unit: Array2<f64>, unit: &Array2<f64>, norm: &Array1<f64>) -> Array2<f64> {
    for ((mut d, u), &n) in d_unit
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norm.iter())
    {
        if n == 0.0 {
            d.fill(0.0);
            continue;
        }
        let radial = d.dot(&u);
        d.scaled_add(-radial, &u);
        d /= n;
    }
    d_unit
}
