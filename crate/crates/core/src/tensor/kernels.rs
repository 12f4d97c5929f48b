//! Inner loops shared by forward and backward passes.

use super::Real;

/// `c += a · b` with `a` (m×k), `b` (k×n), `c` (m×n), all row-major.
///
/// The i-k-j order accumulates each output element over `k` in index order, so
/// a row's result never depends on the other rows in the batch.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
}

/// Transposes a row-major (rows×cols) matrix.
pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// `c += aᵀ · b` with `a` (k×m), `b` (k×n).
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm_acc(&at, b, c, m, k, n);
}

/// `c += a · bᵀ` with `a` (m×k), `b` (n×k).
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, c, m, k, n);
}

/// Softmax over `n` strided entries; `keep` masks entries out (they get exact
/// zero). A fully masked slice yields all zeros.
pub(crate) fn softmax_slice<T: Real>(
    x: &[T],
    out: &mut [T],
    outer: usize,
    n: usize,
    inner: usize,
    keep: Option<&[bool]>,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let kept = |j: usize| keep.is_none_or(|m| m[at(j)]);
            let mut max = T::neg_infinity();
            for j in 0..n {
                if kept(j) && x[at(j)] > max {
                    max = x[at(j)];
                }
            }
            if max == T::neg_infinity() {
                for j in 0..n {
                    out[at(j)] = T::zero();
                }
                continue;
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = if kept(j) {
                    (x[at(j)] - max).exp()
                } else {
                    T::zero()
                };
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        assert_eq!(c, expect);

        let mut c = vec![0.0; m * n];
        gemm_tn_acc(&transpose(&a, m, k), &b, &mut c, m, k, n);
        assert_eq!(c, expect);

        let mut c = vec![0.0; m * n];
        gemm_nt_acc(&a, &transpose(&b, k, n), &mut c, m, k, n);
        assert_eq!(c, expect);
    }

    #[test]
    fn masked_softmax_zeroes_and_handles_empty() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let keep = [true, false, true, false];
        let mut out = [0.0; 4];
        softmax_slice(&x, &mut out, 1, 4, 1, Some(&keep));
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);

        let none = [false; 4];
        softmax_slice(&x, &mut out, 1, 4, 1, Some(&none));
        assert_eq!(out, [0.0; 4]);
    }
}
