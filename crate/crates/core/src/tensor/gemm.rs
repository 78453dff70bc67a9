//! Strided single-precision GEMM on top of `matrixmultiply`.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major `rows × cols`.
    pub fn row_major(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// View of a row-major `cols × rows` buffer as its transpose.
    pub fn transposed(rows: usize) -> Self {
        Self {
            row: 1,
            col: rows as isize,
        }
    }
}

const SMALL_M: usize = 4;

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    debug_assert!(extent(m, k, sa) <= a.len());
    debug_assert!(extent(k, n, sb) <= b.len());
    if m <= SMALL_M && sa.col == 1 && sb.row == 1 {
        // rows of `a` and columns of `b` are contiguous: plain dot products
        // avoid packing the (possibly huge) weight matrix
        for i in 0..m {
            let ar = &a[i * sa.row as usize..i * sa.row as usize + k];
            for j in 0..n {
                let bc = &b[j * sb.col as usize..j * sb.col as usize + k];
                let cij = &mut c[i * n + j];
                *cij = dot(ar, bc) + if beta == 0.0 { 0.0 } else { beta * *cij };
            }
        }
        return;
    }
    // SAFETY: the extents of all three views were checked against the slice
    // lengths above and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.row as usize + (cols - 1) * s.col as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Strides::row_major(2), &b, Strides::row_major(2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, &a, Strides::transposed(2), &b, Strides::row_major(2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // accumulate
        gemm(2, 2, 2, &a, Strides::transposed(2), &b, Strides::row_major(2), 1.0, &mut c);
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }

    #[test]
    fn small_rows_match_naive_product() {
        let (k, n) = (37, 5);
        for m in 1..=6 {
            let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.25).collect();
            // `w` is [n, k]; multiply by its transpose
            let w: Vec<f32> = (0..n * k).map(|i| ((i * 5 % 13) as f32 - 6.0) * 0.5).collect();
            let mut c = vec![1.0; m * n];
            gemm(m, k, n, &a, Strides::row_major(k), &w, Strides::transposed(k), 1.0, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let want: f32 = 1.0 + (0..k).map(|p| a[i * k + p] * w[j * k + p]).sum::<f32>();
                    assert!((c[i * n + j] - want).abs() < 1e-4, "m={m}");
                }
            }
        }
    }
}
