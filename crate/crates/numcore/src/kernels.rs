//! Dense loops shared by the differentiable ops.
//!
//! Every accumulation runs in a fixed order, so results are bit-identical
//! between runs regardless of how rows are blocked.

/// `c += a * b` with `a: m x k`, `b: k x n`, `c: m x n`, all row-major.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let x = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += x * brow[j];
            }
        }
        i += 1;
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const T: usize = 16;
    for r0 in (0..rows).step_by(T) {
        for c0 in (0..cols).step_by(T) {
            for r in r0..(r0 + T).min(rows) {
                for c in c0..(c0 + T).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// `a * b^T` with `a: m x k`, `b: n x k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let bt = transpose(n, k, b);
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, &bt, &mut c);
    c
}

/// `a^T * b` with `a: k x m`, `b: k x n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let at = transpose(k, m, a);
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, &at, b, &mut c);
    c
}

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
pub fn im2col(win: &Window, img: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let k = win.kernel;
    debug_assert_eq!(cols.len(), win.col_rows() * ho * wo);
    for c in 0..win.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && (iy as usize) < win.height
                            && ix >= 0
                            && (ix as usize) < win.width
                        {
                            img[(c * win.height + iy as usize) * win.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
pub fn col2im(win: &Window, cols: &[f64], img: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let k = win.kernel;
    for c in 0..win.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy as usize >= win.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix as usize >= win.width {
                            continue;
                        }
                        img[(c * win.height + iy as usize) * win.width + ix as usize] +=
                            src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_loop_exactly() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (3, 4, 6);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 5) as f64).collect();
        let reference = naive(m, k, n, &a, &b);
        assert_eq!(gemm_nt(m, k, n, &a, &transpose(k, n, &b)), reference);
        assert_eq!(gemm_tn(m, k, n, &transpose(m, k, &a), &b), reference);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            channels: 2,
            height: 6,
            width: 4,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let img: Vec<f64> = (0..48).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols_probe: Vec<f64> = (0..win.col_rows() * win.col_cols())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&win, &img, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&win, &cols_probe, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
