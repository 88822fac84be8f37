/// Row/column strides of a dense matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    pub(crate) fn new(rs: usize, cs: usize) -> Self {
        Self {
            rs: rs as isize,
            cs: cs as isize,
        }
    }

    /// Contiguous row-major matrix with `cols` columns.
    pub(crate) fn row(cols: usize) -> Self {
        Self::new(cols, 1)
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// `c += a @ b` with `a: (m, k)`, `b: (k, n)`, `c: (m, n)` given as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], lc: Layout) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(la.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(lb.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            1.0,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}
