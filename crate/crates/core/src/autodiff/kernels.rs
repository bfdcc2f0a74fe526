//! Dense numeric kernels shared by the tape operations.

/// Geometry of a 2-D convolution, resolved once at forward time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix (`C * Kh * Kw`).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the unfolded patch matrix (`B * H' * W'`).
    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// `c = a * b + beta * c` for strided row/column layouts.
///
/// Lengths are checked against the extents implied by the strides so the
/// call into `matrixmultiply` stays in bounds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds `x` (NCHW) into a `[C*Kh*Kw, B*H'*W']` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.positions();
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let p = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[p * n..(p + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut row[b * plane..(b + 1) * plane];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih as usize >= g.height {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                        let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && (iw as usize) < g.width {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto `dx`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.positions();
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let p = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[p * n..(p + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &row[b * plane..(b + 1) * plane];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih as usize >= g.height {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                        let src_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, &v) in src_row.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && (iw as usize) < g.width {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise numerically stable log-softmax of a `[rows, k]` matrix.
pub(crate) fn log_softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}
