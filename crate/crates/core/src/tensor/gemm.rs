//! Thin bounds-checked wrapper around `matrixmultiply::sgemm`.

/// A strided view of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    /// Dense row-major `rows × cols` matrix starting at `offset`.
    pub fn dense(offset: usize, cols: usize) -> Self {
        View {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a dense row-major matrix with `cols` columns.
    pub fn dense_t(offset: usize, cols: usize) -> Self {
        View {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = beta * c + alpha * a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    beta: f32,
    c: &mut [f32],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: all three views were bounds-checked above, and `c` is uniquely
    // borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views_agree_with_loops() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, View::dense(0, 3), &b, View::dense(0, 2), 0.0, &mut c, View::dense(0, 2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // aᵀ·a is 3×3, via the transposed view
        let mut g = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, View::dense_t(0, 3), &a, View::dense(0, 3), 0.0, &mut g, View::dense(0, 3));
        assert_eq!(g[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(g[5], 2.0 * 3.0 + 5.0 * 6.0);
    }
}
