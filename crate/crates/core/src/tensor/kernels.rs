//! Dense compute kernels shared by forward and backward passes.
//!
//! All kernels accumulate into their output (`c += ...`) so gradient buffers
//! can be summed in place.

use alloc::vec;
use alloc::vec::Vec;

const MR: usize = 4;
const NR: usize = 4;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Each `MR×NR` tile of `c` is accumulated in registers over the whole of
/// `k`, then added to `c` once. Row blocks of `a` and column panels of `b`
/// are packed contiguously first.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    if k > 0 && m_full > 0 && n_full > 0 {
        // a_pack[blk][p][r] = a[blk·MR + r][p]
        let mut a_pack = vec![0.0; m_full * k];
        for (blk, dst) in a_pack.chunks_exact_mut(MR * k).enumerate() {
            for (p, d) in dst.chunks_exact_mut(MR).enumerate() {
                for (r, v) in d.iter_mut().enumerate() {
                    *v = a[(blk * MR + r) * k + p];
                }
            }
        }
        let mut b_pack = vec![0.0; k * NR];
        for j in (0..n_full).step_by(NR) {
            for (p, d) in b_pack.chunks_exact_mut(NR).enumerate() {
                d.copy_from_slice(&b[p * n + j..p * n + j + NR]);
            }
            for (blk, ap) in a_pack.chunks_exact(MR * k).enumerate() {
                let mut acc = [[0.0f64; NR]; MR];
                for (av, bv) in ap.chunks_exact(MR).zip(b_pack.chunks_exact(NR)) {
                    for r in 0..MR {
                        for s in 0..NR {
                            acc[r][s] += av[r] * bv[s];
                        }
                    }
                }
                let i = blk * MR;
                for (r, row) in acc.iter().enumerate() {
                    let out = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
    }
    for i in 0..m_full {
        edge_row(n, n_full, &a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n]);
    }
    for i in m_full..m {
        edge_row(n, 0, &a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n]);
    }
}

/// Columns `from..n` of one output row.
fn edge_row(n: usize, from: usize, a_row: &[f64], b: &[f64], c_row: &mut [f64]) {
    if from == n {
        return;
    }
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n + from..(p + 1) * n];
        for (cv, &bv) in c_row[from..].iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(m, k, a);
    gemm_nn(k, m, n, &at, g, c);
}

/// Row-major `rows×cols` → `cols×rows`.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of a strided 2-D correlation from an `h×w` image to an `oh×ow` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one image (`channels×h×w`) into `col[(c,ki,kj) × (oy,ox)]`.
pub fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, ki, g.h) else {
                        dst[oy * g.ow..(oy + 1) * g.ow].fill(0.0);
                        continue;
                    };
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(ox, kj, g.w) {
                            Some(x) => img[(c * g.h + y) * g.w + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `img` (accumulating).
pub fn col2im(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(x) = g.source(ox, kj, g.w) {
                            img[(c * g.h + y) * g.w + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        let bt = transpose(3, 2, &b);
        let mut c2 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c, c2);
        // aᵀ·a is 3×3
        let mut ata = [0.0; 9];
        gemm_tn(2, 3, 3, &a, &a, &mut ata);
        assert_eq!(ata[0], 1.0 + 16.0);
        assert_eq!(ata[4], 4.0 + 25.0);
    }

    #[test]
    fn tiled_gemm_matches_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (4, 3, 4), (7, 5, 9), (8, 2, 13), (9, 6, 3)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.71).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();
            let mut c: Vec<f64> = (0..m * n).map(|i| i as f64).collect();
            let mut want = c.clone();
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] += (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                }
            }
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{m}×{k}×{n}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { channels: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1, oh: 3, ow: 3 };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let col_y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; col_y.len()];
        im2col(&g, &img, &mut col);
        let lhs: f64 = col.iter().zip(&col_y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&g, &col_y, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
