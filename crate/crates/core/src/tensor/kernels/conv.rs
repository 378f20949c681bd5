//! im2col based convolution and transposed convolution for one sample.

use super::gemm;

/// Output extent of a padded, strided window sweep; `None` if the kernel
/// does not fit the padded input.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds zero-padded windows of `x` (C, H, W) into `cols` (C·k·k, oh·ow).
pub(crate) fn im2col(g: &Geometry, x: &[f32], cols: &mut [f32]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `x` (C, H, W).
pub(crate) fn col2im(g: &Geometry, cols: &[f32], x: &mut [f32]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Borrowed im2col matrix, skipping the copy for pointwise convolutions.
pub(crate) fn columns<'a>(g: &Geometry, x: &'a [f32], scratch: &'a mut Vec<f32>) -> &'a [f32] {
    if g.is_pointwise() {
        return x;
    }
    scratch.resize(g.col_rows() * g.col_cols(), 0.0);
    im2col(g, x, scratch);
    scratch
}

/// Forward convolution of one sample: `out` (Cout, oh·ow) = W · cols.
pub(crate) fn conv_forward(g: &Geometry, x: &[f32], weight: &[f32], c_out: usize, out: &mut [f32]) {
    let mut scratch = Vec::new();
    let cols = columns(g, x, &mut scratch);
    gemm(c_out, g.col_rows(), g.col_cols(), weight, false, cols, false, 0.0, out);
}

/// Input gradient of one sample.
pub(crate) fn conv_backward_input(g: &Geometry, grad_out: &[f32], weight: &[f32], c_out: usize, dx: &mut [f32]) {
    if g.is_pointwise() {
        gemm(g.col_rows(), c_out, g.col_cols(), weight, true, grad_out, false, 0.0, dx);
        return;
    }
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), c_out, g.col_cols(), weight, true, grad_out, false, 0.0, &mut dcols);
    dx.fill(0.0);
    col2im(g, &dcols, dx);
}

/// Weight gradient contribution of one sample: `dw` (Cout, C·k·k).
pub(crate) fn conv_backward_weight(g: &Geometry, x: &[f32], grad_out: &[f32], c_out: usize, dw: &mut [f32]) {
    let mut scratch = Vec::new();
    let cols = columns(g, x, &mut scratch);
    gemm(c_out, g.col_cols(), g.col_rows(), grad_out, false, cols, true, 0.0, dw);
}

/// Transposed convolution of one sample. `g` describes the *output* side as
/// the im2col input (Cout, Hout, Wout) and `g.out_h × g.out_w` the input
/// spatial extent; weight layout is (Cin, Cout, k, k).
pub(crate) fn tconv_forward(g: &Geometry, x: &[f32], weight: &[f32], c_in: usize, out: &mut [f32]) {
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), c_in, g.col_cols(), weight, true, x, false, 0.0, &mut cols);
    out.fill(0.0);
    col2im(g, &cols, out);
}

pub(crate) fn tconv_backward_input(g: &Geometry, grad_out: &[f32], weight: &[f32], c_in: usize, dx: &mut [f32]) {
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col(g, grad_out, &mut dcols);
    gemm(c_in, g.col_rows(), g.col_cols(), weight, false, &dcols, false, 0.0, dx);
}

pub(crate) fn tconv_backward_weight(g: &Geometry, x: &[f32], grad_out: &[f32], c_in: usize, dw: &mut [f32]) {
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col(g, grad_out, &mut dcols);
    gemm(c_in, g.col_cols(), g.col_rows(), x, false, &dcols, true, 0.0, dw);
}
