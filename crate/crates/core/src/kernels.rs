// Raw numeric kernels shared by the tape ops.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents and strides
    // handed to dgemm, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `a[m×k] · b[k×n]` by a plain `i, p, j` loop.
pub(crate) fn direct_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (arow, crow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    out
}

/// Matrix product whose entries do not depend on the order of the shared
/// axis: permuting `k` in both operands leaves the result bit-identical.
///
/// Each product is split against two fixed binning boundaries derived from
/// global magnitude bounds; the binned parts are multiples of one quantum
/// and are summed exactly, so addition order cannot matter. The residual
/// below the second bin (about 80 bits under the bound) is dropped.
pub(crate) fn order_invariant_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let amax = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let bmax = b.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let bound = amax * bmax;
    if bound == 0.0 || !bound.is_finite() || !(amax.is_finite() && bmax.is_finite()) {
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a, false, b, false, &mut out, false);
        return out;
    }
    // 2^e1 >= 2·k·bound keeps every term under half the bin and every
    // partial sum inside 53 bits of the bin quantum.
    let headroom = (2 * k) as f64;
    let e1 = (headroom * bound).log2().ceil() as i32;
    let e2 = e1 - 53 + headroom.log2().ceil() as i32;
    let sigma1 = 1.5 * 2f64.powi(e1);
    let sigma2 = 1.5 * 2f64.powi(e2);

    let mut out = vec![0.0; m * n];
    let mut hi = vec![0.0; n];
    let mut lo = vec![0.0; n];
    for i in 0..m {
        hi.iter_mut().for_each(|x| *x = 0.0);
        lo.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            for ((h, l), &bv) in hi.iter_mut().zip(lo.iter_mut()).zip(row) {
                let x = aip * bv;
                let q1 = (sigma1 + x) - sigma1;
                let r = x - q1;
                let q2 = (sigma2 + r) - sigma2;
                *h += q1;
                *l += q2;
            }
        }
        for j in 0..n {
            out[i * n + j] = hi[j] + lo[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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
    fn gemm_transpose_flags() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, naive(2, 3, 2, &a, &b));

        // a stored 3x2 and used transposed as 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        let mut c2 = vec![1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, true);
        let expect: Vec<f64> = naive(2, 3, 2, &a, &b).iter().map(|x| x + 1.0).collect();
        assert_eq!(c2, expect);
    }

    #[test]
    fn direct_matches_naive() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        assert_eq!(direct_matmul(3, 4, 5, &a, &b), naive(3, 4, 5, &a, &b));
    }

    #[test]
    fn order_invariant_matmul_ignores_reduction_order() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (3, 257, 5);
        let a: Vec<f64> = (0..m * k)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..6)))
            .collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = order_invariant_matmul(m, k, n, &a, &b);
        let oracle = naive(m, k, n, &a, &b);
        for (x, y) in base.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let pa: Vec<f64> = (0..m * k).map(|i| a[(i / k) * k + perm[i % k]]).collect();
            let pb: Vec<f64> = (0..k * n).map(|i| b[perm[i / n] * n + i % n]).collect();
            let got = order_invariant_matmul(m, k, n, &pa, &pb);
            assert!(got.iter().zip(&base).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn order_invariant_matmul_zero_and_exact_cases() {
        assert_eq!(order_invariant_matmul(1, 2, 1, &[0.0, 0.0], &[1.0, 2.0]), vec![0.0]);
        assert_eq!(order_invariant_matmul(1, 2, 1, &[1.0, 0.0], &[5.0, 7.0]), vec![5.0]);
        assert_eq!(
            order_invariant_matmul(1, 4, 1, &[1.0, 0.0, 0.0, 1.0], &[1.0, 2.0, 3.0, 4.0]),
            vec![5.0]
        );
    }
}
