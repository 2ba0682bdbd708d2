//! Thin wrapper over `matrixmultiply` for row-major contiguous buffers.

/// `C = op(A) * op(B) + beta * C` with `op(A)` m x k and `op(B)` k x n.
/// `a` is stored m x k (k x m when `trans_a`), `b` k x n (n x k when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and the strides describe exactly
    // those buffers; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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
