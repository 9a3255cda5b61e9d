//! Row-major dense kernels and their adjoints.

/// `a (m x k) . b (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m x k) . b^T` where `b` is `n x k`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `acc += a^T . b` with `a` `m x k` and `b` `m x n`, giving `k x n`.
pub(crate) fn add_at_b(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(acc.len(), k * n);
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (c, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(br) {
                *c += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of `y = x . W` for `x` (m x k), `W` (k x n): accumulates `dW`
/// and returns `dx = dy . W^T`.
pub(crate) fn linear_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    add_at_b(dw, x, dy, m, k, n);
    matmul_bt(dy, w, m, n, k)
}

pub(crate) struct NormCache {
    pub normed: Vec<f64>,
    pub inv_rms: Vec<f64>,
}

/// RMSNorm over rows of width `d`: `y = g * x / sqrt(mean(x^2) + eps)`.
pub(crate) fn rms_norm(x: &[f64], g: &[f64], d: usize, eps: f64) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut normed = vec![0.0; x.len()];
    let mut inv_rms = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for j in 0..d {
            let n = xr[j] * inv;
            normed[r * d + j] = n;
            y[r * d + j] = g[j] * n;
        }
    }
    (y, NormCache { normed, inv_rms })
}

pub(crate) fn rms_norm_backward(dy: &[f64], g: &[f64], cache: &NormCache, dg: &mut [f64], d: usize) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let n = &cache.normed[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut proj = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * n[j];
            proj += dyr[j] * g[j] * n[j];
        }
        proj /= d as f64;
        let inv = cache.inv_rms[r];
        for j in 0..d {
            dx[r * d + j] = inv * (dyr[j] * g[j] - n[j] * proj);
        }
    }
    dx
}

/// Rotary tables: `cos[pos * half + i]`, angle `pos * theta^(-2i / head_dim)`.
pub(crate) struct Rope {
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl Rope {
    pub fn new(seq_len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = vec![0.0; seq_len * half];
        let mut sin = vec![0.0; seq_len * half];
        for pos in 0..seq_len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let a = pos as f64 * freq;
                cos[pos * half + i] = a.cos();
                sin[pos * half + i] = a.sin();
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates pairs `(2i, 2i+1)` of every head in place. `inverse` applies
    /// the transpose rotation, which is the adjoint.
    pub fn apply(&self, x: &mut [f64], d_model: usize, inverse: bool) {
        let head_dim = self.half * 2;
        let rows = x.len() / d_model;
        for pos in 0..rows {
            for h in 0..d_model / head_dim {
                let base = pos * d_model + h * head_dim;
                for i in 0..self.half {
                    let (c, s) = (self.cos[pos * self.half + i], self.sin[pos * self.half + i]);
                    let s = if inverse { -s } else { s };
                    let (a, b) = (x[base + 2 * i], x[base + 2 * i + 1]);
                    x[base + 2 * i] = a * c - b * s;
                    x[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Log-sum-exp of a row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // b^T, 2x3
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let mut acc = vec![0.0; 6];
        add_at_b(&mut acc, &a, &[1.0, 1.0, 1.0, 1.0], 2, 3, 2);
        assert_eq!(acc, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn rope_inverse_roundtrip_and_norm() {
        let rope = Rope::new(5, 4, 10_000.0);
        let orig: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        rope.apply(&mut x, 8, false);
        for r in 0..5 {
            let n0: f64 = orig[r * 8..r * 8 + 8].iter().map(|v| v * v).sum();
            let n1: f64 = x[r * 8..r * 8 + 8].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        assert_eq!(&x[..8], &orig[..8]);
        rope.apply(&mut x, 8, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rms_norm_unit_rms() {
        let (y, _) = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 2, 0.0);
        let rms = ((y[0] * y[0] + y[1] * y[1]) / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lse_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
