use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// d/dx GELU = Phi(x) + x phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm. Returns the output and the cache for backward.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    let mut out = xhat.clone();
    Zip::from(out.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(gain).and(bias).for_each(|o, &g, &b| *o = *o * g + b);
    });
    (out, LnCache { xhat, inv_std })
}

/// Backward through layer norm. Accumulates gain/bias gradients and
/// returns the input gradient.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let cols = dy.ncols() as f64;
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let dxhat: Array1<f64> = &dy.row(r) * gain;
        let xh = cache.xhat.row(r);
        let m1 = dxhat.sum() / cols;
        let m2 = dxhat.dot(&xh) / cols;
        let is = cache.inv_std[r];
        Zip::from(dx.row_mut(r))
            .and(&dxhat)
            .and(&xh)
            .for_each(|o, &d, &h| *o = is * (d - m1 - h * m2));
    }
    dx
}

/// Adds a bias vector to every row.
pub(crate) fn add_row(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += &b.view().insert_axis(Axis(0));
    m
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_at(row: ArrayView1<f64>, index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[index] - lse
}
