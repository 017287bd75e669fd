//! Raw f32 compute kernels: GEMM wrappers, im2col/col2im, pooling, resizing.
//!
//! Everything here is deterministic: fixed loop order, no reductions whose
//! order depends on thread scheduling.

/// c = alpha * a @ b + beta * c, all row-major contiguous.
/// a: m x k, b: k x n, c: m x n.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a @ b^T + beta * c; b is given as an n x k row-major matrix.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a^T @ b + beta * c; a is given as a k x m row-major matrix.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Geometry shared by the im2col/col2im pair.
///
/// `grid` positions (gy, gx) sweep a convolution output; every kernel tap
/// (ki, kj) maps the grid position to `target` coordinates
/// (gy*stride + ki - pad, gx*stride + kj - pad). Out-of-bounds taps read as
/// zero (gather) or are dropped (scatter).
#[derive(Clone, Copy, Debug)]
pub struct PatchGeom {
    pub channels: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Gather target pixels into a rows() x cols() patch matrix.
pub fn im2col(g: &PatchGeom, target: &[f32], cols: &mut [f32]) {
    debug_assert_eq!(target.len(), g.channels * g.target_h * g.target_w);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &target[c * g.target_h * g.target_w..(c + 1) * g.target_h * g.target_w];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for gy in 0..g.grid_h {
                    let ty = (gy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut row[gy * g.grid_w..(gy + 1) * g.grid_w];
                    if ty < 0 || ty >= g.target_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let trow = &plane[ty as usize * g.target_w..(ty as usize + 1) * g.target_w];
                    for (gx, slot) in out_row.iter_mut().enumerate() {
                        let tx = (gx * g.stride + kj) as isize - g.pad as isize;
                        *slot = if tx < 0 || tx >= g.target_w as isize {
                            0.0
                        } else {
                            trow[tx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto the target (adjoint of im2col).
pub fn col2im(g: &PatchGeom, cols: &[f32], target: &mut [f32]) {
    debug_assert_eq!(target.len(), g.channels * g.target_h * g.target_w);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut target[c * g.target_h * g.target_w..(c + 1) * g.target_h * g.target_w];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for gy in 0..g.grid_h {
                    let ty = (gy * g.stride + ki) as isize - g.pad as isize;
                    if ty < 0 || ty >= g.target_h as isize {
                        continue;
                    }
                    let trow =
                        &mut plane[ty as usize * g.target_w..(ty as usize + 1) * g.target_w];
                    let in_row = &row[gy * g.grid_w..(gy + 1) * g.grid_w];
                    for (gx, &v) in in_row.iter().enumerate() {
                        let tx = (gx * g.stride + kj) as isize - g.pad as isize;
                        if tx >= 0 && tx < g.target_w as isize {
                            trow[tx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Bilinear resize of one channel plane (half-pixel centers, clamped edges).
pub fn resize_bilinear_plane(src: &[f32], ih: usize, iw: usize, dst: &mut [f32], oh: usize, ow: usize) {
    let sy = ih as f32 / oh as f32;
    let sx = iw as f32 / ow as f32;
    for oy in 0..oh {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ih - 1);
        let wy = fy - y0 as f32;
        for ox in 0..ow {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let wx = fx - x0 as f32;
            let v = src[y0 * iw + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * iw + x1] * (1.0 - wy) * wx
                + src[y1 * iw + x0] * wy * (1.0 - wx)
                + src[y1 * iw + x1] * wy * wx;
            dst[oy * ow + ox] = v;
        }
    }
}

/// Adjoint of `resize_bilinear_plane`: scatter output gradients back.
pub fn resize_bilinear_plane_backward(grad_out: &[f32], oh: usize, ow: usize, grad_in: &mut [f32], ih: usize, iw: usize) {
    let sy = ih as f32 / oh as f32;
    let sx = iw as f32 / ow as f32;
    for oy in 0..oh {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ih - 1);
        let wy = fy - y0 as f32;
        for ox in 0..ow {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let wx = fx - x0 as f32;
            let g = grad_out[oy * ow + ox];
            grad_in[y0 * iw + x0] += g * (1.0 - wy) * (1.0 - wx);
            grad_in[y0 * iw + x1] += g * (1.0 - wy) * wx;
            grad_in[y1 * iw + x0] += g * wy * (1.0 - wx);
            grad_in[y1 * iw + x1] += g * wy * wx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        // matmul(I2, A) == A
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![3.0, -1.0, 2.5, 7.0];
        let mut c = vec![0.0; 4];
        gemm_nn(2, 2, 2, 1.0, &i2, &a, 0.0, &mut c);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        // a: 2x3, b: 3x2
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c_nn = vec![0.0; 4];
        gemm_nn(2, 3, 2, 1.0, &a, &b, 0.0, &mut c_nn);

        // b^T stored as 2x3
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = vec![0.0; 4];
        gemm_nt(2, 3, 2, 1.0, &a, &bt, 0.0, &mut c_nt);
        assert_eq!(c_nn, c_nt);

        // a^T stored as 3x2
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = vec![0.0; 4];
        gemm_tn(2, 3, 2, 1.0, &at, &b, 0.0, &mut c_tn);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data
        let g = PatchGeom {
            channels: 2,
            target_h: 5,
            target_w: 4,
            grid_h: conv_out_dim(5, 3, 2, 1),
            grid_w: conv_out_dim(4, 3, 2, 1),
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..g.channels * g.target_h * g.target_w)
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let y: Vec<f32> = (0..g.rows() * g.cols())
            .map(|i| (i as f32 * 0.71).cos())
            .collect();
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(&g, &x, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xt = vec![0.0; x.len()];
        col2im(&g, &y, &mut xt);
        let rhs: f32 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_resize_constant_preserved() {
        let src = vec![2.5; 6 * 6];
        let mut dst = vec![0.0; 3 * 3];
        resize_bilinear_plane(&src, 6, 6, &mut dst, 3, 3);
        for v in dst {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }
}
