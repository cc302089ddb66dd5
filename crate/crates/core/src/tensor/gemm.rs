//! Dense row-major matrix product.
//!
//! Every output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` in
//! ascending `k`, exactly like a naive triple loop. Register tiling only
//! changes which elements are in flight at once, never the order of the
//! additions for a single element, so results are reproducible bit for bit
//! across tile shapes and vector widths.

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] = a[m×k] · b[k×n]`; `c` is overwritten.
pub(crate) fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }

    let mut panel = vec![0f32; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let width = NR.min(n - j0);
        if width == NR {
            for p in 0..k {
                panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j0..p * n + j0 + NR]);
            }
            let mut i0 = 0;
            while i0 + MR <= m {
                tile_full(a, &panel, c, i0, j0, k, n);
                i0 += MR;
            }
            if i0 < m {
                tile_edge(a, b, c, i0..m, j0..j0 + NR, k, n);
            }
        } else {
            tile_edge(a, b, c, 0..m, j0..n, k, n);
        }
        j0 += NR;
    }
}

#[inline(always)]
fn tile_full(a: &[f32], panel: &[f32], c: &mut [f32], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[0f32; NR]; MR];
    let rows: [&[f32]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for (p, brow) in panel.chunks_exact(NR).enumerate() {
        let brow: &[f32; NR] = brow.try_into().unwrap();
        for r in 0..MR {
            let av = rows[r][p];
            for (acc, &bv) in acc[r].iter_mut().zip(brow) {
                *acc += av * bv;
            }
        }
    }
    for (r, acc) in acc.iter().enumerate() {
        let row = (i0 + r) * n + j0;
        c[row..row + NR].copy_from_slice(acc);
    }
}

fn tile_edge(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        for j in cols.clone() {
            let mut s = 0f32;
            for p in 0..k {
                s += arow[p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

/// Row-major transpose of a `rows×cols` matrix.
pub(crate) fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0f32; rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for cc in c0..(c0 + B).min(cols) {
                    out[cc * rows + r] = src[r * cols + cc];
                }
            }
        }
    }
    out
}
