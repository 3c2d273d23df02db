//! Row-major dense kernels and their backward passes.
//!
//! Matrices are flat slices; `x` with `rows` rows of width `cols` stores
//! element `(r, c)` at `r * cols + c`. Affine weights are `[in, out]`.

use super::Real;

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out (k×n) += aᵀ · b` with `a (m×k)`, `b (m×n)`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` with `b (k×n)`, giving `m×k`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `y = x·W + b` for `rows` inputs of width `d_in`.
pub fn affine<T: Real>(x: &[T], w: &[T], b: &[T], rows: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = matmul(x, w, rows, d_in, d_out);
    for r in 0..rows {
        for (o, &bv) in y[r * d_out..(r + 1) * d_out].iter_mut().zip(b) {
            *o += bv;
        }
    }
    y
}

/// Accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    matmul_tn_acc(x, dy, rows, d_in, d_out, dw);
    for r in 0..rows {
        for (g, &d) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *g += d;
        }
    }
    matmul_nt(dy, w, rows, d_out, d_in)
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Normalizes each row of width `d`, then applies `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    d: usize,
    eps: f64,
) -> (Vec<T>, LayerNormCache<T>) {
    let eps = T::of(eps);
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dy: &[T],
    rows: usize,
    d: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); rows * d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for c in 0..d {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            let dxh = g[c] * gamma[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= dn;
        mean_dxh_xh /= dn;
        for c in 0..d {
            let dxh = g[c] * gamma[c];
            dx[r * d + c] = cache.rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub struct AttentionCache<T> {
    /// `heads × seq × seq`, row `i` is the distribution of query `i` over keys.
    pub probs: Vec<T>,
}

/// Multi-head scaled dot-product attention over one sequence.
///
/// `q`, `k`, `v` are `seq × hidden`; head `h` owns columns
/// `h*dh..(h+1)*dh`. Keys with `valid[j] == false` get zero weight.
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    valid: &[bool],
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, AttentionCache<T>) {
    let dh = hidden / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ctx = vec![T::zero(); seq * hidden];
    let mut probs = vec![T::zero(); heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..seq {
            let qi = &q[i * hidden + off..i * hidden + off + dh];
            let mut max = T::neg_infinity();
            for j in 0..seq {
                if valid[j] {
                    let kj = &k[j * hidden + off..j * hidden + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let p = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let mut total = T::zero();
            for j in 0..seq {
                if valid[j] {
                    p[j] = (scores[j] - max).exp();
                    total += p[j];
                }
            }
            let out = &mut ctx[i * hidden + off..i * hidden + off + dh];
            for j in 0..seq {
                if valid[j] {
                    p[j] /= total;
                    let vj = &v[j * hidden + off..j * hidden + off + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    (ctx, AttentionCache { probs })
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    dctx: &[T],
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = hidden / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); seq * hidden];
    let mut dk = vec![T::zero(); seq * hidden];
    let mut dv = vec![T::zero(); seq * hidden];
    let mut dp = vec![T::zero(); seq];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..seq {
            let p = &cache.probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let dci = &dctx[i * hidden + off..i * hidden + off + dh];
            let mut weighted = T::zero();
            for j in 0..seq {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &v[j * hidden + off..j * hidden + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                weighted += p[j] * dp[j];
                let dvj = &mut dv[j * hidden + off..j * hidden + off + dh];
                for (d, &c) in dvj.iter_mut().zip(dci) {
                    *d += p[j] * c;
                }
            }
            for j in 0..seq {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * hidden + off + c] += ds * k[j * hidden + off + c];
                    dk[j * hidden + off + c] += ds * q[i * hidden + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_nt(&a, &a, 2, 3, 2), vec![14.0, 32.0, 32.0, 77.0]);
        let mut out = vec![0.0; 9];
        matmul_tn_acc(&a, &a, 2, 3, 3, &mut out);
        assert_eq!(out[0], 17.0);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1, 4, 0.0);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(3.0f64) - 2.9964).abs() < 1e-3);
        let h = 1e-6;
        for x in [-2.0f64, -0.3, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
