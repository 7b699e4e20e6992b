//! Dense row-major kernels used by the composers' forward and backward passes.

/// `x[n×inp] · w[inp×out] + b`.
pub fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64], inp: usize, out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * inp);
    debug_assert_eq!(w.len(), inp * out);
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        let row = &mut y[i * out..(i + 1) * out];
        row.copy_from_slice(b);
        for k in 0..inp {
            let xv = x[i * inp + k];
            if xv == 0.0 {
                continue;
            }
            for (yj, wj) in row.iter_mut().zip(&w[k * out..(k + 1) * out]) {
                *yj += xv * wj;
            }
        }
    }
    y
}

/// `gx[n×inp] += gy[n×out] · wᵀ`.
pub fn affine_grad_input(gy: &[f64], n: usize, w: &[f64], inp: usize, out: usize, gx: &mut [f64]) {
    for i in 0..n {
        let gy_row = &gy[i * out..(i + 1) * out];
        for k in 0..inp {
            gx[i * inp + k] += dot(gy_row, &w[k * out..(k + 1) * out]);
        }
    }
}

/// `gw[inp×out] += xᵀ · gy`.
pub fn affine_grad_weight(x: &[f64], gy: &[f64], n: usize, inp: usize, out: usize, gw: &mut [f64]) {
    for i in 0..n {
        let gy_row = &gy[i * out..(i + 1) * out];
        for k in 0..inp {
            let xv = x[i * inp + k];
            if xv == 0.0 {
                continue;
            }
            for (g, d) in gw[k * out..(k + 1) * out].iter_mut().zip(gy_row) {
                *g += xv * d;
            }
        }
    }
}

/// `gb[out] += Σ_rows gy`.
pub fn affine_grad_bias(gy: &[f64], n: usize, out: usize, gb: &mut [f64]) {
    for i in 0..n {
        for (g, d) in gb.iter_mut().zip(&gy[i * out..(i + 1) * out]) {
            *g += d;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Unit vector and the norm it was divided by. Returns the input unchanged
/// (norm reported as 1) if it is degenerate.
pub fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = dot(v, v).sqrt();
    if n < crate::features::DEGENERATE_NORM {
        return (v.to_vec(), 1.0);
    }
    (v.iter().map(|x| x / n).collect(), n)
}

/// Backward of `u = z / ‖z‖` given `u`, `‖z‖` and `∂L/∂u`.
pub fn normalize_backward(unit: &[f64], norm: f64, g_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, g_unit);
    unit.iter()
        .zip(g_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Row-wise layer norm. Returns `(output, normalized input, 1/σ per row)`.
pub fn layer_norm(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer-norm backward. Accumulates gain/bias grads and returns `∂L/∂x`.
pub fn layer_norm_backward(
    gy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    n: usize,
    d: usize,
    gain: &[f64],
    g_gain: &mut [f64],
    g_bias: &mut [f64],
) -> Vec<f64> {
    let mut gx = vec![0.0; n * d];
    let mut g_hat = vec![0.0; d];
    for i in 0..n {
        let gy_row = &gy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        for j in 0..d {
            g_gain[j] += gy_row[j] * xh[j];
            g_bias[j] += gy_row[j];
            g_hat[j] = gy_row[j] * gain[j];
        }
        let mean_g = g_hat.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&g_hat, xh) / d as f64;
        for j in 0..d {
            gx[i * d + j] = rstd[i] * (g_hat[j] - mean_g - xh[j] * mean_gx);
        }
    }
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
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
