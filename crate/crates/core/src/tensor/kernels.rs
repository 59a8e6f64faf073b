use super::Element;

fn beta<F: Element>(accumulate: bool) -> F {
    if accumulate {
        F::one()
    } else {
        F::zero()
    }
}

/// `c (+)= a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn mm<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, beta(acc), c, n as isize, 1);
}

/// `c (+)= a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn mm_nt<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, beta(acc), c, n as isize, 1);
}

/// `c (+)= aᵀ·b` with `a: k×m`, `b: k×n`.
pub(crate) fn mm_tn<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, beta(acc), c, n as isize, 1);
}
