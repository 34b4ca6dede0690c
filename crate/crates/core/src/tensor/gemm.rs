/// `c = a·b + beta·c` for row/column-strided operands.
///
/// `a` is `m × k` with strides `(row, col)`, `b` is `k × n`, `c` is a dense
/// row-major `m × n` buffer. Strides let callers multiply by transposes and
/// head slices without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    gemm_strided(m, k, n, a, a_strides, b, b_strides, c, (n, 1), beta);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, c_strides), "gemm: output buffer too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * c_strides.0 + j * c_strides.1];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches; strides
    // fit in isize for any buffer that fits in memory.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}
