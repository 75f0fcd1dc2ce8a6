//! Raw row-major kernels shared by forward and backward passes.

/// `c = a · b + beta · c` with explicit strides on `a` and `b`; `c` is dense `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided access
    // for the given (m, k, n); `c` is exclusively borrowed and dense.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with optional mask. Masked entries come out as exactly 0.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Result<Vec<f64>, usize> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, yr)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(r);
        }
        let mut sum = 0.0;
        for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            if keep(j) {
                *y = (v - mx).exp();
                sum += *y;
            }
        }
        let inv = 1.0 / sum;
        yr.iter_mut().for_each(|y| *y *= inv);
    }
    Ok(out)
}
