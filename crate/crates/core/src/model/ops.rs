// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major kernels used by the forward and backward passes.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
}

/// `gb[k×m] += aᵀ · d` with `a[n×k]`, `d[n×m]`.
pub(crate) fn matmul_at_acc(a: &[f64], d: &[f64], gb: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let drow = &d[i * m..(i + 1) * m];
        if drow.iter().all(|&x| x == 0.0) {
            continue;
        }
        for p in 0..k {
            let x = a[i * k + p];
            for (g, &dv) in gb[p * m..(p + 1) * m].iter_mut().zip(drow) {
                *g += x * dv;
            }
        }
    }
}

/// `da[n×k] += d · bᵀ` with `d[n×m]`, `b[k×m]`.
pub(crate) fn matmul_bt_acc(d: &[f64], b: &[f64], da: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let drow = &d[i * m..(i + 1) * m];
        if drow.iter().all(|&x| x == 0.0) {
            continue;
        }
        for p in 0..k {
            da[i * k + p] += dot(drow, &b[p * m..(p + 1) * m]);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn sum_rows_acc(d: &[f64], g: &mut [f64]) {
    for row in d.chunks(g.len()) {
        for (a, b) in g.iter_mut().zip(row) {
            *a += b;
        }
    }
}

/// Row-wise layer norm. Returns (y, xhat, rstd).
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (xr[j] - mu) * s;
            xhat[r * d + j] = h;
            y[r * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer-norm backward. Accumulates parameter grads when given; returns dx.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; dy.len()];
    for (r, &s) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xr = &xhat[r * d..(r + 1) * d];
        if let Some(g) = dgain.as_deref_mut() {
            for j in 0..d {
                g[j] += dyr[j] * xr[j];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for j in 0..d {
                b[j] += dyr[j];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dh = dyr[j] * gain[j];
            m1 += dh;
            m2 += dh * xr[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[r * d + j] = s * (dyr[j] * gain[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        let mut out = vec![0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, vec![4.0, 5.0, 10.0, 11.0]);
        let mut gb = vec![0.0; 6];
        matmul_at_acc(&a, &out, &mut gb, 2, 3, 2);
        assert_eq!(gb, vec![44.0, 49.0, 58.0, 65.0, 72.0, 81.0]);
        let mut da = vec![0.0; 6];
        matmul_bt_acc(&out, &b, &mut da, 2, 3, 2);
        assert_eq!(da, vec![4.0, 5.0, 9.0, 10.0, 11.0, 21.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
