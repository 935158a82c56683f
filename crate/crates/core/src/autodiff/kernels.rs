//! Plain row-major matrix kernels. All of them accumulate into `c`.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Swap the last two axes of `batch` stacked `rows×cols` matrices.
pub(crate) fn transpose_batched<S: Scalar>(x: &[S], batch: usize, rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    let plane = rows * cols;
    for g in 0..batch {
        let src = &x[g * plane..(g + 1) * plane];
        let dst = &mut out[g * plane..(g + 1) * plane];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Generic rank-4 axis permutation: `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute4<S: Scalar>(x: &[S], shape: [usize; 4], perm: [usize; 4]) -> Vec<S> {
    let in_strides = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]], shape[perm[3]]];
    let strides = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let mut out = Vec::with_capacity(x.len());
    for i0 in 0..out_shape[0] {
        for i1 in 0..out_shape[1] {
            for i2 in 0..out_shape[2] {
                let base = i0 * strides[0] + i1 * strides[1] + i2 * strides[2];
                for i3 in 0..out_shape[3] {
                    out.push(x[base + i3 * strides[3]]);
                }
            }
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
