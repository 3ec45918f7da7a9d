//! Dense kernels shared by the forward and backward passes.

use super::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Strided view of a matrix: `(row stride, column stride)`.
pub(crate) type Strides = (usize, usize);

pub(crate) const fn row_major(cols: usize) -> Strides {
    (cols, 1)
}

/// Transposed view of a row-major matrix with `cols` columns.
pub(crate) const fn transposed(cols: usize) -> Strides {
    (1, cols)
}

fn last_index(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// `C = alpha * A * B + beta * C` where `A` is `m x k`, `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, n, sc) < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * sc.0 + j * sc.1];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(last_index(m, k, sa) < a.len(), "gemm: A view out of bounds");
    assert!(last_index(k, n, sb) < b.len(), "gemm: B view out of bounds");
    // SAFETY: all strided indices were bounds-checked above and `c` does not
    // alias `a` or `b` (distinct borrows).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        )
    }
}

/// `out = x · w + bias` for row-major `x: n x k`, `w: k x m`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], bias: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    gemm(n, k, m, T::one(), x, row_major(k), w, row_major(m), T::one(), &mut out, row_major(m));
    out
}

/// Gradients of `linear`: accumulates into `dw`, `db`; returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) -> Vec<T> {
    gemm(k, n, m, T::one(), x, transposed(k), dy, row_major(m), T::one(), dw, row_major(m));
    for row in dy.chunks_exact(m) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); n * k];
    gemm(n, m, k, T::one(), dy, row_major(m), w, transposed(m), T::zero(), &mut dx, row_major(k));
    dx
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm of an `n x d` matrix.
pub(crate) fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, LayerNormCache<T>) {
    let n = x.len() / d;
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut out = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Backward through `layer_norm`: accumulates gain/bias grads, returns `dx`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    d: usize,
) -> Vec<T> {
    let n = dy.len() / d;
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = vec![T::zero(); n * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean1 = T::zero();
        let mut mean2 = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean1 += dxhat[j];
            mean2 += dxhat[j] * xh[j];
        }
        mean1 *= inv_d;
        mean2 *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean1 - xh[j] * mean2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Log-softmax of a logit row in f64, with the max subtracted first.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}
