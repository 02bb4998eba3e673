//! Dense row-major kernels used by the toy model.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `a (n×k) · b (k×m)`.
pub(super) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out (k×m) += aᵀ · b` with `a` n×k and `b` n×m.
pub(super) fn matmul_at_b_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (n×m) · bᵀ` with `b` k×m, giving n×k.
pub(super) fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(super) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(super) fn add_bias(a: &mut [f64], bias: &[f64], n: usize, m: usize) {
    for i in 0..n {
        for (x, b) in a[i * m..(i + 1) * m].iter_mut().zip(bias) {
            *x += b;
        }
    }
}

pub(super) fn col_sum_acc(a: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(&a[i * m..(i + 1) * m]) {
            *o += x;
        }
    }
}

/// Row-wise RMS normalization. Returns the normalized rows and each row's
/// RMS.
pub(super) fn rmsnorm(x: &[f64], gain: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut rms = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + super::RMS_EPS).sqrt();
        rms[i] = r;
        for c in 0..d {
            y[i * d + c] = gain[c] * row[c] / r;
        }
    }
    (y, rms)
}

/// Accumulates the input gradient into `dx` and the gain gradient into
/// `dgain`.
#[allow(clippy::too_many_arguments)]
pub(super) fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    rms: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
) {
    for i in 0..n {
        let r = rms[i];
        let row = &x[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for c in 0..d {
            dgain[c] += g[c] * row[c] / r;
            dot += g[c] * gain[c] * row[c];
        }
        let k = dot / (d as f64 * r * r * r);
        for c in 0..d {
            dx[i * d + c] += g[c] * gain[c] / r - row[c] * k;
        }
    }
}

pub(super) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub(super) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}
