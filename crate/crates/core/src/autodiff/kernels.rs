//! Dense kernels shared by the graph operations. Summation order is fixed,
//! so results do not depend on thread count or run.

const COL_TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Four rows of `c` are updated per pass over a row of `b`, over column
/// tiles that stay in L1.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        let len = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let block = &mut c[i * n..(i + 4) * n];
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (r0, r1, r2, r3) = (
                &mut r0[j0..j1],
                &mut r1[j0..j1],
                &mut r2[j0..j1],
                &mut r3[j0..j1],
            );
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                let br = &b[p * n + j0..p * n + j0 + len];
                for t in 0..len {
                    let bv = br[t];
                    r0[t] += a0 * bv;
                    r1[t] += a1 * bv;
                    r2[t] += a2 * bv;
                    r3[t] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                let br = &b[p * n + j0..p * n + j0 + len];
                for t in 0..len {
                    row[t] += av * br[t];
                }
            }
            i += 1;
        }
    }
}

/// Row-major transpose of a `rows × cols` matrix.
pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
