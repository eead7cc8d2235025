use super::{Result, Scalar, Tensor, TensorError};

/// `c (+)= op(a) * op(b)` for row-major buffers.
///
/// `a` is logically `m x k` (stored `k x m` when `trans_a`), `b` is logically
/// `k x n` (stored `n x k` when `trans_b`). With `accumulate` the product is
/// added to `c`, otherwise `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extents the
    // strides address.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

/// Row-wise softmax with an optional additive mask of `0` / `-inf` entries.
///
/// The row maximum over visible entries is subtracted before exponentiation,
/// so large logits never overflow. Masked entries come out as exact zeros.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, cols) = logits.dims2()?;
    if let Some(mask) = mask {
        if mask.shape() != logits.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "row_softmax",
                lhs: logits.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
    }
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let x = logits.row(r);
        let m = mask.map(|m| m.row(r));
        let visible = |j: usize| m.map_or(true, |m| m[j] != T::neg_infinity());
        let mut max = T::neg_infinity();
        let mut any = false;
        for (j, &v) in x.iter().enumerate() {
            if visible(j) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(TensorError::DegenerateRow { row: r });
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for j in 0..cols {
            if visible(j) {
                let e = (x[j] - max).exp();
                o[j] = e;
                total = total + e;
            }
        }
        let inv = T::one() / total;
        for v in o.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor::new([rows, cols], out)
}
