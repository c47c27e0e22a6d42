//! Slice-level kernels shared by the differentiable graph and plain code.

use crate::scalar::Real;

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == R::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_at_b_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == R::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_a_bt_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = R::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`. Entries whose `mask` flag is
/// false are forced to exactly zero; `mask` has the same layout as `x`.
pub fn softmax<R: Real>(x: &[R], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<R> {
    let (outer, n, inner) = axis_extents(shape, axis);
    let mut y = vec![R::zero(); x.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| o * n * inner + i * inner + k;
            let allowed = |i: usize| mask.is_none_or(|m| m[idx(i)]);
            let mut max = R::neg_infinity();
            for i in 0..n {
                if allowed(i) && x[idx(i)] > max {
                    max = x[idx(i)];
                }
            }
            let mut sum = R::zero();
            for i in 0..n {
                if allowed(i) {
                    let e = (x[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    sum += e;
                }
            }
            for i in 0..n {
                y[idx(i)] /= sum;
            }
        }
    }
    y
}

/// Log-softmax along the last axis of a `rows×cols` matrix.
pub fn log_softmax_rows<R: Real>(x: &[R], cols: usize) -> Vec<R> {
    let mut y = vec![R::zero(); x.len()];
    for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    y
}

/// Output spatial extent of a padded 3×3 convolution.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Unfolds `input: cin×h×w` (zero padded by one) into a
/// `(cin·9) × (h'·w')` patch matrix.
pub fn im2col<R: Real>(input: &[R], cin: usize, h: usize, w: usize, stride: usize) -> Vec<R> {
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let mut cols = vec![R::zero(); cin * 9 * ho * wo];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = input[c * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<R: Real>(cols: &[R], cin: usize, h: usize, w: usize, stride: usize) -> Vec<R> {
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let mut out = vec![R::zero(); cin * h * w];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[c * h * w + iy as usize * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}
