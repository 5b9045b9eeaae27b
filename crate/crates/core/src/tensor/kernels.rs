// Raw buffer kernels shared by the tape ops.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`). Each output element's reduction order depends only on `k`,
/// so a row of `c` is bitwise independent of the other rows of `a`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // extents of slices whose lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds NCHW input into rows of `(c, ky, kx)` patches, one row per output pixel.
pub(crate) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let pl = g.patch_len();
    let kk = g.kernel * g.kernel;
    let plane = g.height * g.width;
    let mut cols = vec![0.0; g.out_rows() * pl];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * pl..(row + 1) * pl];
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * plane;
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                dst[c * kk + ky * g.kernel + kx] = input[base + y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto an NCHW buffer.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let pl = g.patch_len();
    let kk = g.kernel * g.kernel;
    let plane = g.height * g.width;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &cols[row * pl..(row + 1) * pl];
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * plane;
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                out[base + y * g.width + x] += src[c * kk + ky * g.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, h, w]` channel planes to `[b·h·w, c]` pixel rows.
pub(crate) fn nchw_to_rows(x: &[f32], b: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub(crate) fn rows_to_nchw(x: &[f32], b: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for p in 0..hw {
            let src = &x[(bi * hw + p) * c..(bi * hw + p + 1) * c];
            for (ci, &v) in src.iter().enumerate() {
                out[(bi * c + ci) * hw + p] = v;
            }
        }
    }
    out
}
