//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Strides for a matrix stored row-major as `rows × cols`, read either
    /// as stored or transposed.
    pub fn dense(stored_cols: usize, transpose: bool) -> Self {
        if transpose {
            Strides {
                row: 1,
                col: stored_cols as isize,
            }
        } else {
            Strides {
                row: stored_cols as isize,
                col: 1,
            }
        }
    }
}

/// `c ← alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` addressed by strides.
///
/// Slices must cover every element the strides reach; this is checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * sc.row + j as isize * sc.col) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(reach(m, k, sa) < a.len() + 1, "gemm: a too short");
    assert!(reach(k, n, sb) < b.len() + 1, "gemm: b too short");
    assert!(reach(m, n, sc) < c.len() + 1, "gemm: c too short");
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}

fn reach(rows: usize, cols: usize, s: Strides) -> usize {
    debug_assert!(s.row > 0 && s.col > 0);
    (rows - 1) * s.row as usize + (cols - 1) * s.col as usize + 1
}

/// Row-major `c ← op(a)·op(b) + beta·c`, `op(a): m×k`, `op(b): k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let sa = Strides::dense(if trans_a { m } else { k }, trans_a);
    let sb = Strides::dense(if trans_b { k } else { n }, trans_b);
    gemm_strided(m, k, n, 1.0, a, sa, b, sb, beta, c, Strides::dense(n, false));
}
