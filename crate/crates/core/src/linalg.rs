//! Dense kernels shared by the tape primitives.

/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with explicit
/// row/column strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(reach(m, k, rsa, csa) as usize <= a.len());
    assert!(reach(k, n, rsb, csb) as usize <= b.len());
    assert!(reach(m, n, rsc, csc) as usize <= c.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_image(&self) -> usize {
        self.c_in * self.height * self.width
    }
}

/// Unfolds one image (`c_in×h×w`) into a `patch_len × out_plane` column matrix.
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for ci in 0..g.c_in {
        let chan = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for ci in 0..g.c_in {
        let chan = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
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
    fn gemm_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // transposed view of `a` against itself: aᵀa is 3x3
        let mut d = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, 1, 3, &a, 3, 1, 0.0, &mut d, 3, 1);
        assert_eq!(d[0], 1.0 + 16.0);
        assert_eq!(d[4], 4.0 + 25.0);
    }
}
