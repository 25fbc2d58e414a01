//! Dense kernels on row-major `f64` buffers, each with its backward pass.

use super::params::{LayerNormParams, Linear};

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// `y[t] = W x[t] + b` for `rows` inputs of width `lin.n_in`.
pub fn linear_forward(lin: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let (n_in, n_out) = (lin.n_in, lin.n_out);
    debug_assert_eq!(x.len(), rows * n_in);
    let mut y = vec![0.0; rows * n_out];
    for t in 0..rows {
        let xt = &x[t * n_in..(t + 1) * n_in];
        let yt = &mut y[t * n_out..(t + 1) * n_out];
        for (o, y_o) in yt.iter_mut().enumerate() {
            *y_o = lin.b[o] + dot(&lin.w[o * n_in..(o + 1) * n_in], xt);
        }
    }
    y
}

/// Accumulates `dW`, `db` into `grad` and returns `dx`.
pub fn linear_backward(lin: &Linear, grad: &mut Linear, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
    let (n_in, n_out) = (lin.n_in, lin.n_out);
    let mut dx = vec![0.0; rows * n_in];
    for t in 0..rows {
        let xt = &x[t * n_in..(t + 1) * n_in];
        let dyt = &dy[t * n_out..(t + 1) * n_out];
        let dxt = &mut dx[t * n_in..(t + 1) * n_in];
        for (o, &g) in dyt.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            axpy(g, xt, &mut grad.w[o * n_in..(o + 1) * n_in]);
            axpy(g, &lin.w[o * n_in..(o + 1) * n_in], dxt);
        }
    }
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(ln: &LayerNormParams, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
    let d = ln.gamma.len();
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for t in 0..rows {
        let xt = &x[t * d..(t + 1) * d];
        let mean = xt.iter().sum::<f64>() / d as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for i in 0..d {
            let h = (xt[i] - mean) * is;
            xhat[t * d + i] = h;
            y[t * d + i] = ln.gamma[i] * h + ln.beta[i];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    ln: &LayerNormParams,
    grad: &mut LayerNormParams,
    cache: &LayerNormCache,
    dy: &[f64],
    rows: usize,
) -> Vec<f64> {
    let d = ln.gamma.len();
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for t in 0..rows {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let dyt = &dy[t * d..(t + 1) * d];
        for i in 0..d {
            grad.gamma[i] += dyt[i] * xh[i];
            grad.beta[i] += dyt[i];
            dxhat[i] = dyt[i] * ln.gamma[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[t];
        for i in 0..d {
            dx[t * d + i] = is * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Rotation angle for dimension pair `k` of a `dim`-wide vector at `position`.
#[inline]
pub fn rope_angle(position: f64, k: usize, dim: usize) -> f64 {
    position / ROPE_BASE.powf(2.0 * k as f64 / dim as f64)
}

/// Rotates consecutive dimension pairs `(2k, 2k+1)` by `position / 10000^(2k/d)`.
pub fn rope_rotate(v: &[f64], position: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    rope_in_place(&mut out, position, 1.0);
    out
}

/// In-place rotation; `direction = -1.0` applies the inverse.
pub fn rope_in_place(v: &mut [f64], position: f64, direction: f64) {
    let dim = v.len();
    assert!(dim % 2 == 0, "rotary embedding needs an even width, got {dim}");
    for k in 0..dim / 2 {
        let (s, c) = (direction * rope_angle(position, k, dim)).sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        v[2 * k] = a * c - b * s;
        v[2 * k + 1] = a * s + b * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_zero_position_is_identity() {
        let v = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotate(&v, 0.0), v.to_vec());
    }

    #[test]
    fn rope_unit_angle() {
        let r = rope_rotate(&[1.0, 0.0], 1.0);
        assert!((r[0] - 1f64.cos()).abs() < 1e-15);
        assert!((r[1] - 1f64.sin()).abs() < 1e-15);
        assert!((r[0] - 0.5403).abs() < 1e-4 && (r[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        for pos in [1.0, 5.0, 77.0, 511.0] {
            let r = rope_rotate(&v, pos);
            assert!((dot(&r, &r).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-12);
            let mut back = r.clone();
            rope_in_place(&mut back, pos, -1.0);
            for (a, b) in back.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
